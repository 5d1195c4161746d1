"""Configuration dataclasses, the desk/full profiles and the flat config-file format.

Config files are line-oriented ``key = value`` pairs with dotted sections::

    # comment
    seed = 7
    train.total_iters = 2000
    weights.lambda_img = 5

Resolution order is defaults < file < command-line flags.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for an unknown or ill-typed configuration key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class NetConfig:
    height: int = 256
    width: int = 128
    backbone: str = "resnet50"  # resnet50 | resnet18
    backbone_base: int = 64  # resnet18 only
    backbone_last_stride: int = 2
    pretrained: str = ""  # optional path to a backbone state dict
    app_channels: int = 2048
    feat_dim: int = 512
    struct_channels: int = 128
    es_base: int = 16
    use_aspp: bool = True
    g_base: int = 64
    d_base: int = 32
    mlp_hidden: int = 512
    n_res: int = 4
    num_classes: int = 751

    @property
    def app_code_dim(self) -> int:
        return self.app_channels * 4


@dataclass
class LossWeights:
    lambda_img: float = 5.0
    lambda_id: float = 0.5
    lambda_prim: float = 2.0  # plateau value
    lambda_fine: float = 0.4  # plateau value, = alpha * lambda_prim
    alpha: float = 0.2
    beta: float = 0.5
    warmup_start_iter: int = 30000
    warmup_len_iters: int = 4000
    r1_gamma: float = 10.0


@dataclass
class TrainConfig:
    total_iters: int = 100000
    batch_size: int = 8
    instances_per_id: int = 2
    checkpoint_every: int = 10000
    lr_app: float = 0.002
    momentum_app: float = 0.9
    lr_gen: float = 0.0001
    adam_betas: tuple = (0.0, 0.999)
    teacher_iters: int = 20000
    teacher_lr: float = 0.01
    teacher_batch: int = 32
    flip: bool = True
    encoders_in_d_phase: bool = True
    detach_g_for_prim: bool = False
    joint: bool = True
    deterministic: bool = True


@dataclass
class RunConfig:
    profile: str = "full"
    seed: int = 0
    data_root: str = ""
    layout: str = "folder_per_id"
    out: str = "runs/default"
    checkpoint: str = ""
    teacher: str = ""
    grid: str = "4x4"
    steps: int = 8
    mode: str = "appearance"
    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)


def desk_profile() -> RunConfig:
    """Small profile: 64x32 inputs, narrow backbone, tiny generator; runs on one CPU."""
    cfg = RunConfig(profile="desk")
    cfg.net = NetConfig(
        height=64, width=32, backbone="resnet18", backbone_base=16,
        backbone_last_stride=1, app_channels=128, feat_dim=512,
        struct_channels=32, es_base=8, g_base=32, d_base=16, mlp_hidden=256,
        num_classes=4,
    )
    cfg.weights = LossWeights(warmup_start_iter=200, warmup_len_iters=40)
    cfg.train = TrainConfig(
        total_iters=2000, batch_size=4, checkpoint_every=200,
        lr_gen=0.0003, teacher_iters=300, teacher_batch=16,
        detach_g_for_prim=True,  # coupled G collapses onto the teacher's uniform output at this scale
    )
    return cfg


def full_profile() -> RunConfig:
    return RunConfig(profile="full")


PROFILES = {"desk": desk_profile, "full": full_profile}


def make_config(profile: str = "desk") -> RunConfig:
    try:
        return PROFILES[profile]()
    except KeyError:
        raise ConfigError("profile", f"unknown profile {profile!r}") from None


def _coerce(key: str, current: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(float(v) for v in text.strip("()").split(","))
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {type(current).__name__}") from None
    return text


def set_key(cfg: RunConfig, dotted: str, value: Any) -> None:
    """Assign ``value`` to the dotted key, e.g. ``train.total_iters``."""
    parts = dotted.split(".")
    target: Any = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, part):
            raise ConfigError(dotted, "unknown section")
        target = getattr(target, part)
    leaf = parts[-1]
    names = {f.name for f in fields(target)} if dataclasses.is_dataclass(target) else set()
    if leaf not in names:
        raise ConfigError(dotted, "unknown key")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(dotted, "is a section, not a key")
    setattr(target, leaf, _coerce(dotted, current, value))


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config_file(cfg: RunConfig, path: str | Path) -> RunConfig:
    for key, value in parse_config_text(Path(path).read_text()).items():
        if key == "profile":
            continue
        set_key(cfg, key, value)
    return cfg


def resolve_config(profile: str | None = None, config_file: str | None = None,
                   overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a config from defaults, then a config file, then explicit overrides."""
    file_values = parse_config_text(Path(config_file).read_text()) if config_file else {}
    prof = profile or file_values.get("profile") or "desk"
    cfg = make_config(prof)
    for key, value in file_values.items():
        if key != "profile":
            set_key(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_key(cfg, key, value)
    return cfg


def flatten(cfg: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in flatten(cfg).items():
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def net_fingerprint(net: NetConfig) -> str:
    """Hash of every field that changes parameter shapes."""
    shape_keys = {k: v for k, v in dataclasses.asdict(net).items() if k != "pretrained"}
    blob = json.dumps(shape_keys, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
