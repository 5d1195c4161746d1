"""Appearance encoder, structure encoder, AdaIN decoder, multi-scale patch discriminator, teacher.

All sizes are driven by :class:`~dgnet.config.NetConfig`. With the full profile
the layer outputs follow the published architecture tables exactly; the desk
profile narrows every width but keeps the same topology and strides.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .config import NetConfig

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IN_EPS = 1e-5
LRELU_SLOPE = 0.2


class ShapeError(ValueError):
    pass


def rgb_to_gray(x: torch.Tensor) -> torch.Tensor:
    """ITU-R 601 luminance of a ``(..., 3, H, W)`` tensor, keeping a channel axis of 1."""
    if x.shape[-3] != 3:
        raise ShapeError(f"expected 3 channels, got {x.shape[-3]}")
    r, g, b = x.unbind(dim=-3)
    return (0.299 * r + 0.587 * g + 0.114 * b).unsqueeze(-3)


def adain(feat: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = IN_EPS) -> torch.Tensor:
    """gamma * (feat - mean) / std + beta with statistics per sample and channel.

    ``gamma`` and ``beta`` are ``(N, C)``.
    """
    n, c = feat.shape[:2]
    mean = feat.mean(dim=(2, 3), keepdim=True)
    var = feat.var(dim=(2, 3), keepdim=True, unbiased=False)
    normed = (feat - mean) / torch.sqrt(var + eps)
    return gamma.view(n, c, 1, 1) * normed + beta.view(n, c, 1, 1)


class ImageNormalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


def conv_in_lrelu(cin, cout, k, stride=1, dilation=1, norm=True):
    pad = dilation * (k - 1) // 2
    layers = [nn.Conv2d(cin, cout, k, stride, pad, dilation=dilation)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, eps=IN_EPS))
    layers.append(nn.LeakyReLU(LRELU_SLOPE))
    return nn.Sequential(*layers)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with an identity shortcut."""

    def __init__(self, channels, norm=True):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm1 = nn.InstanceNorm2d(channels, eps=IN_EPS) if norm else nn.Identity()
        self.norm2 = nn.InstanceNorm2d(channels, eps=IN_EPS) if norm else nn.Identity()

    def forward(self, x):
        y = F.leaky_relu(self.norm1(self.conv1(x)), LRELU_SLOPE)
        y = self.norm2(self.conv2(y))
        return x + y


class AdaINResBlock(nn.Module):
    """Residual block whose two normalisation layers take external scale/bias."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    n_params = property(lambda self: 4 * self.channels)

    def forward(self, x, params):
        g1, b1, g2, b2 = params.split(self.channels, dim=1)
        y = F.leaky_relu(adain(self.conv1(x), 1 + g1, b1), LRELU_SLOPE)
        y = adain(self.conv2(y), 1 + g2, b2)
        return x + y


class ASPP(nn.Module):
    """1x1 branch plus three (1x1, dilated 3x3) branches, concatenated."""

    def __init__(self, cin, branch, dilations=(2, 4, 6)):
        super().__init__()
        self.branches = nn.ModuleList([conv_in_lrelu(cin, branch, 1)])
        for d in dilations:
            self.branches.append(nn.Sequential(
                conv_in_lrelu(cin, branch, 1),
                conv_in_lrelu(branch, branch, 3, dilation=d),
            ))

    def forward(self, x):
        return torch.cat([b(x) for b in self.branches], dim=1)


class StructureEncoder(nn.Module):
    """Gray image ``1xHxW`` -> structure code ``C_s x H/4 x W/4``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        b = cfg.es_base
        cs = cfg.struct_channels
        self.normalize = ImageNormalize((0.5,), (0.5,))
        self.conv1 = conv_in_lrelu(1, b, 3, stride=2)
        self.conv2 = conv_in_lrelu(b, 2 * b, 3)
        self.conv3 = conv_in_lrelu(2 * b, 2 * b, 3)
        self.conv4 = conv_in_lrelu(2 * b, 4 * b, 3, stride=2)
        self.resblocks = nn.Sequential(*[ResBlock(4 * b) for _ in range(cfg.n_res)])
        if cfg.use_aspp:
            self.aspp = ASPP(4 * b, cs // 4)
            mid = 4 * (cs // 4)
        else:
            self.aspp = nn.Identity()
            mid = 4 * b
        self.conv5 = conv_in_lrelu(mid, cs, 1)

    def forward(self, gray):
        h, w = gray.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"structure input {h}x{w} is not divisible by 4")
        x = self.normalize(gray)
        x = self.conv4(self.conv3(self.conv2(self.conv1(x))))
        x = self.resblocks(x)
        return self.conv5(self.aspp(x))


class Decoder(nn.Module):
    """AdaIN decoder: structure code + appearance code -> image in [0, 1]."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cs = cfg.struct_channels
        g = cfg.g_base
        self.resblocks = nn.ModuleList([AdaINResBlock(cs) for _ in range(cfg.n_res)])
        n_adain = sum(blk.n_params for blk in self.resblocks)
        self.mapper = nn.Sequential(
            nn.Linear(cfg.app_code_dim, cfg.mlp_hidden), nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden), nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, n_adain),
        )
        self.up1 = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv1 = conv_in_lrelu(cs, g, 5, norm=False)
        self.up2 = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv2 = conv_in_lrelu(g, g // 2, 5, norm=False)
        self.conv3 = conv_in_lrelu(g // 2, g // 2, 3, norm=False)
        self.conv4 = conv_in_lrelu(g // 2, g // 2, 3, norm=False)
        self.conv5 = nn.Conv2d(g // 2, 3, 1)
        self.struct_channels = cs
        self.app_code_dim = cfg.app_code_dim

    def adain_params(self, app_code):
        return self.mapper(app_code.flatten(1))

    def forward(self, app_code, struct_code):
        if struct_code.shape[1] != self.struct_channels:
            raise ShapeError(f"structure code has {struct_code.shape[1]} channels, "
                             f"expected {self.struct_channels}")
        if app_code[0].numel() != self.app_code_dim:
            raise ShapeError(f"appearance code has {app_code[0].numel()} elements, "
                             f"expected {self.app_code_dim}")
        params = self.adain_params(app_code)
        x = struct_code
        offset = 0
        for blk in self.resblocks:
            x = blk(x, params[:, offset:offset + blk.n_params])
            offset += blk.n_params
        x = self.conv1(self.up1(x))
        x = self.conv2(self.up2(x))
        x = self.conv4(self.conv3(x))
        return (torch.tanh(self.conv5(x)) + 1) / 2


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.downsample is None else self.downsample(x)
        return F.relu(y + skip)


class NarrowResNet18(nn.Module):
    """18-layer residual network with a configurable base width; output channels = 8 * base."""

    def __init__(self, base=64, last_stride=2):
        super().__init__()
        self.conv1 = nn.Conv2d(3, base, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(base)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        widths = [base, 2 * base, 4 * base, 8 * base]
        strides = [1, 2, 2, last_stride]
        stages = []
        cin = base
        for w, s in zip(widths, strides):
            stages.append(nn.Sequential(BasicBlock(cin, w, s), BasicBlock(w, w, 1)))
            cin = w
        self.layer1, self.layer2, self.layer3, self.layer4 = stages
        self.out_channels = cin

    def forward(self, x):
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


def build_backbone(cfg: NetConfig) -> nn.Module:
    if cfg.backbone == "resnet50":
        net = torchvision.models.resnet50(weights=None)
        if cfg.backbone_last_stride == 1:
            net.layer4[0].conv2.stride = (1, 1)
            net.layer4[0].downsample[0].stride = (1, 1)
        if cfg.pretrained:
            state = torch.load(cfg.pretrained, map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=False)
        net.avgpool = nn.Identity()
        net.fc = nn.Identity()
        body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                             net.layer1, net.layer2, net.layer3, net.layer4)
        out_channels = 2048
    elif cfg.backbone == "resnet18":
        body = NarrowResNet18(cfg.backbone_base, cfg.backbone_last_stride)
        if cfg.pretrained:
            body.load_state_dict(torch.load(cfg.pretrained, map_location="cpu", weights_only=True))
        out_channels = body.out_channels
    else:
        raise ValueError(f"unknown backbone {cfg.backbone!r}")
    if out_channels != cfg.app_channels:
        raise ShapeError(f"backbone yields {out_channels} channels but app_channels={cfg.app_channels}")
    return body


MIN_H, MIN_W = 32, 16


class AppearanceEncoder(nn.Module):
    """Residual backbone + adaptive max pool to ``C_a x 4 x 1``, two feature heads, two classifiers.

    The same instance serves re-id (heads/classifiers) and generation
    (appearance codes), so generated images fed back here update the
    re-id features online.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.normalize = ImageNormalize(IMAGENET_MEAN, IMAGENET_STD)
        self.backbone = build_backbone(cfg)
        self.pool = nn.AdaptiveMaxPool2d((4, 1))
        self.head_prim = nn.Linear(cfg.app_code_dim, cfg.feat_dim)
        self.head_fine = nn.Linear(cfg.app_code_dim, cfg.feat_dim)
        self.cls_prim = nn.Linear(cfg.feat_dim, cfg.num_classes)
        self.cls_fine = nn.Linear(cfg.feat_dim, cfg.num_classes)

    def encode(self, x):
        h, w = x.shape[-2:]
        if h < MIN_H or w < MIN_W:
            raise ShapeError(f"appearance input {h}x{w} is below the {MIN_H}x{MIN_W} minimum")
        return self.pool(self.backbone(self.normalize(x)))

    def features(self, code):
        flat = code.flatten(1)
        return self.head_prim(flat), self.head_fine(flat)

    def classify(self, feat, head="primary_head"):
        if head == "primary_head":
            return self.cls_prim(feat)
        if head == "fine_head":
            return self.cls_fine(feat)
        raise ValueError(f"unknown head {head!r}")

    def forward(self, x):
        """Return ``(code, f_prim, f_fine, logits_prim, logits_fine)``."""
        code = self.encode(x)
        f_prim, f_fine = self.features(code)
        return code, f_prim, f_fine, self.cls_prim(f_prim), self.cls_fine(f_fine)


class PatchDiscriminator(nn.Module):
    """Single-scale patch discriminator; output map is 1 x H/4 x W/4 logits."""

    def __init__(self, base=32, n_res=4):
        super().__init__()
        self.conv1 = conv_in_lrelu(3, base, 1, norm=False)
        self.conv2 = conv_in_lrelu(base, base, 3, norm=False)
        self.conv3 = conv_in_lrelu(base, base, 3, stride=2, norm=False)
        self.conv4 = conv_in_lrelu(base, base, 3, norm=False)
        self.conv5 = conv_in_lrelu(base, 2 * base, 3, stride=2, norm=False)
        self.resblocks = nn.Sequential(*[ResBlock(2 * base, norm=False) for _ in range(n_res)])
        self.conv6 = nn.Conv2d(2 * base, 1, 1)

    def forward(self, x):
        x = self.conv5(self.conv4(self.conv3(self.conv2(self.conv1(x)))))
        return self.conv6(self.resblocks(x))


class MultiScaleDiscriminator(nn.Module):
    """Three patch discriminators on the full, half and quarter resolution image."""

    def __init__(self, cfg: NetConfig, n_scales=3):
        super().__init__()
        self.nets = nn.ModuleList([PatchDiscriminator(cfg.d_base, cfg.n_res) for _ in range(n_scales)])
        self.normalize = ImageNormalize((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))

    def forward(self, img):
        """List of logit maps, largest scale first."""
        x = self.normalize(img)
        outs = []
        for i, net in enumerate(self.nets):
            if i:
                x = F.avg_pool2d(x, 2)
            outs.append(net(x))
        return outs


class TeacherModel(nn.Module):
    """Baseline identity classifier from the same backbone family as the appearance encoder."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.normalize = ImageNormalize(IMAGENET_MEAN, IMAGENET_STD)
        self.backbone = build_backbone(cfg)
        self.pool = nn.AdaptiveMaxPool2d((4, 1))
        self.head = nn.Linear(cfg.app_code_dim, cfg.feat_dim)
        self.classifier = nn.Linear(cfg.feat_dim, cfg.num_classes)

    def embed(self, x):
        return self.head(self.pool(self.backbone(self.normalize(x))).flatten(1))

    def forward(self, x):
        return self.classifier(self.embed(x))

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode=True):
        # once frozen the teacher stays in eval mode
        if mode and not any(p.requires_grad for p in self.parameters()):
            mode = False
        return super().train(mode)


class DGNet(nn.Module):
    """Container for the four jointly trained networks."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.app_encoder = AppearanceEncoder(cfg)
        self.struct_encoder = StructureEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.discriminator = MultiScaleDiscriminator(cfg)

    def encode_appearance(self, img):
        return self.app_encoder.encode(img)

    def encode_structure(self, img):
        """Accepts RGB or already-gray images."""
        gray = rgb_to_gray(img) if img.shape[-3] == 3 else img
        return self.struct_encoder(gray)

    def decode(self, app_code, struct_code):
        return self.decoder(app_code, struct_code)

    def discriminate(self, img):
        return self.discriminator(img)

    def generate(self, app_img, struct_img):
        return self.decode(self.encode_appearance(app_img), self.encode_structure(struct_img))

    def embed(self, img, beta=0.5):
        code = self.encode_appearance(img)
        f_prim, f_fine = self.app_encoder.features(code)
        return torch.cat([f_prim, beta * f_fine], dim=1)


def param_groups(model: DGNet) -> dict[str, list[nn.Parameter]]:
    """Split parameters into the appearance group (momentum SGD) and generative groups (Adam)."""
    return {
        "app": list(model.app_encoder.parameters()),
        "gen": list(model.struct_encoder.parameters()) + list(model.decoder.parameters()),
        "dis": list(model.discriminator.parameters()),
    }
