import pytest
import torch

from _oracles import finite_difference_errors, generator_gradcheck, r1_gradcheck
from dgnet.config import NetConfig, desk_profile
from dgnet.networks import (
    AdaINResBlock, DGNet, ShapeError, TeacherModel, adain, param_groups, rgb_to_gray,
)


@pytest.fixture(scope="module")
def desk():
    torch.manual_seed(0)
    return DGNet(desk_profile().net).eval()


def test_full_scale_shapes():
    torch.manual_seed(0)
    model = DGNet(NetConfig()).eval()
    x = torch.rand(1, 3, 256, 128)
    with torch.no_grad():
        a = model.encode_appearance(x)
        s = model.encode_structure(x)
        out = model.decode(a, s)
        maps = model.discriminate(out)
    assert tuple(a.shape[1:]) == (2048, 4, 1)
    assert tuple(s.shape[1:]) == (128, 64, 32)
    assert tuple(out.shape[1:]) == (3, 256, 128)
    assert [tuple(m.shape[1:]) for m in maps] == [(1, 64, 32), (1, 32, 16), (1, 16, 8)]


def test_desk_shapes_and_output_range(desk):
    x = torch.rand(2, 3, 64, 32)
    with torch.no_grad():
        a, s = desk.encode_appearance(x), desk.encode_structure(x)
        out = desk.decode(a, s)
        emb = desk.embed(x)
    assert tuple(a.shape) == (2, 128, 4, 1)
    assert tuple(s.shape) == (2, 32, 16, 8)
    assert tuple(out.shape) == (2, 3, 64, 32)
    assert out.min() >= 0 and out.max() <= 1
    assert tuple(emb.shape) == (2, 1024)


def test_embedding_weights_fine_head(desk):
    x = torch.rand(1, 3, 64, 32)
    with torch.no_grad():
        f_prim, f_fine = desk.app_encoder.features(desk.encode_appearance(x))
        emb = desk.embed(x, beta=0.25)
    assert torch.allclose(emb, torch.cat([f_prim, 0.25 * f_fine], 1))


def test_shape_errors(desk):
    with pytest.raises(ShapeError):
        desk.encode_structure(torch.rand(1, 3, 62, 32))
    with pytest.raises(ShapeError):
        desk.encode_appearance(torch.rand(1, 3, 16, 8))
    a = torch.rand(1, 128, 4, 1)
    with pytest.raises(ShapeError):
        desk.decode(a, torch.rand(1, 16, 16, 8))
    with pytest.raises(ShapeError):
        desk.decode(torch.rand(1, 64, 4, 1), torch.rand(1, 32, 16, 8))
    with pytest.raises(ShapeError):
        rgb_to_gray(torch.rand(1, 2, 4, 4))


def test_structure_encoder_sees_only_gray(desk):
    x = torch.rand(1, 3, 64, 32)
    with torch.no_grad():
        assert torch.allclose(desk.encode_structure(x), desk.encode_structure(rgb_to_gray(x)))
        # a chroma change that keeps the luminance leaves the structure code alone
        shifted = x.clone()
        shifted[:, 0] += 0.1
        shifted[:, 1] -= 0.1 * 0.299 / 0.587
        assert torch.allclose(desk.encode_structure(x), desk.encode_structure(shifted), atol=1e-5)


def test_gray_weights():
    px = torch.tensor([1.0, 0.0, 0.0]).view(1, 3, 1, 1)
    assert rgb_to_gray(px).item() == pytest.approx(0.299)


def test_adain_closed_form():
    torch.manual_seed(1)
    feat = torch.randn(2, 3, 8, 4, dtype=torch.float64) * 4 + 2
    gamma = torch.tensor([[1.0, 2.0, 0.5], [3.0, 1.0, 1.0]], dtype=torch.float64)
    beta = torch.tensor([[0.0, -1.0, 4.0], [1.0, 2.0, 3.0]], dtype=torch.float64)
    out = adain(feat, gamma, beta, eps=0.0)
    assert torch.allclose(out.mean(dim=(2, 3)), beta, atol=1e-12)
    assert torch.allclose(out.std(dim=(2, 3), unbiased=False), gamma, atol=1e-12)


def test_adain_block_identity_params_is_instance_norm_residual():
    torch.manual_seed(2)
    blk = AdaINResBlock(4).double()
    assert blk.n_params == 16
    x = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    zeros = torch.zeros(1, 16, dtype=torch.float64)
    y1 = blk(x, zeros)
    y2 = blk(x, zeros.clone())
    assert torch.equal(y1, y2)
    # different params must change the output
    assert not torch.allclose(blk(x, torch.ones(1, 16, dtype=torch.float64)), y1)


def test_batch_equivariance(desk):
    torch.manual_seed(3)
    a_img, s_img = torch.rand(3, 3, 64, 32), torch.rand(3, 3, 64, 32)
    with torch.no_grad():
        batch = desk.generate(a_img, s_img)
        single = torch.cat([desk.generate(a_img[i:i + 1], s_img[i:i + 1]) for i in range(3)])
    assert torch.allclose(batch, single, atol=1e-5)


def test_appearance_encoder_is_shared_by_reid_and_generation(desk):
    calls = []
    handle = desk.app_encoder.backbone.register_forward_hook(lambda *a: calls.append(1))
    try:
        x = torch.rand(1, 3, 64, 32)
        with torch.no_grad():
            desk.generate(x, x)
            desk.embed(x)
    finally:
        handle.remove()
    assert len(calls) == 2
    groups = param_groups(desk)
    assert {id(p) for p in groups["app"]} == {id(p) for p in desk.app_encoder.parameters()}
    ids = [id(p) for g in groups.values() for p in g]
    assert len(ids) == len(set(ids)) == len(list(desk.parameters()))


def test_teacher_freeze_stays_eval():
    t = TeacherModel(desk_profile().net).freeze()
    t.train()
    assert not t.training
    assert not any(p.requires_grad for p in t.parameters())


def test_gradcheck_generator_path():
    errors = generator_gradcheck(seed=0, count=16)
    assert len(errors) == 16 and max(errors) <= 1e-3


def test_gradcheck_r1_penalty():
    errors = r1_gradcheck(seed=0, count=16)
    assert len(errors) == 16 and max(errors) <= 1e-3


class _ScaledGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return 1.01 * g


def test_gradcheck_catches_a_wrong_gradient():
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)
    loss = lambda: (_ScaledGrad.apply(w) ** 2).sum()
    errors = finite_difference_errors(loss, [w], count=5)
    assert min(errors) > 5e-3
