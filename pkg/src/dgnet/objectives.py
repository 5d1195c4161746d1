"""Loss terms, R1 penalty, weight schedule and the weighted total objective."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn.functional as F

from .config import LossWeights


def _check_same(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def img_recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference."""
    _check_same(x, x_hat)
    return (x - x_hat).abs().mean()


def code_recon_loss(code: torch.Tensor, code_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between a latent code and its re-encoding."""
    _check_same(code, code_hat)
    return (code - code_hat).abs().mean()


def id_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """Cross-entropy ``-log softmax(logits)[label]`` averaged over the batch.

    Labels are the 1-based identities in [1, K].
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    label = torch.as_tensor(label, device=logits.device).reshape(-1)
    k = logits.shape[1]
    if (label < 1).any() or (label > k).any():
        raise ValueError(f"identity labels must lie in [1, {k}]")
    return F.cross_entropy(logits, label - 1)


def prim_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """KL(q || p) with q = softmax(teacher), p = softmax(student), batch mean.

    The teacher side is detached.
    """
    if student.dim() == 1:
        student, teacher = student.unsqueeze(0), teacher.unsqueeze(0)
    log_p = F.log_softmax(student, dim=1)
    log_q = F.log_softmax(teacher.detach(), dim=1)
    return (log_q.exp() * (log_q - log_p)).sum(dim=1).mean()


def _bce_per_scale(maps, target: float):
    return [F.binary_cross_entropy_with_logits(m, torch.full_like(m, target)) for m in maps]


def adv_loss_d(disc, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """-(E[log D(real)] + E[log(1 - D(fake))]), summed over scales. ``fake`` is detached."""
    real_terms = _bce_per_scale(disc(real), 1.0)
    fake_terms = _bce_per_scale(disc(fake.detach()), 0.0)
    return sum(r + f for r, f in zip(real_terms, fake_terms))


def adv_loss_g(disc, fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -E[log D(fake)], summed over scales."""
    return sum(_bce_per_scale(disc(fake), 1.0))


def adv_loss_d_from_maps(real_maps, fake_maps) -> torch.Tensor:
    return sum(r + f for r, f in zip(_bce_per_scale(real_maps, 1.0), _bce_per_scale(fake_maps, 0.0)))


def grad_penalty(disc, real: torch.Tensor, gamma: float = 10.0, create_graph: bool = True) -> torch.Tensor:
    """R1: gamma/2 * E ||grad_x D(x)||^2 at real samples.

    ``D(x)`` is the sum of all patch logits over all scales.
    """
    real = real.detach().requires_grad_(True)
    out = disc(real)
    maps = out if isinstance(out, (list, tuple)) else [out]
    score = sum(m.sum() for m in maps)
    (grad,) = torch.autograd.grad(score, real, create_graph=create_graph, allow_unused=True)
    if grad is None:
        # D ignores its input entirely
        return score.new_zeros(())
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(dim=1).mean()


def schedule(iteration: int, cfg: LossWeights) -> LossWeights:
    """Effective weights at ``iteration``.

    lambda_img and lambda_id stay fixed; lambda_prim ramps linearly from 0 to
    its plateau over the warm-up window and lambda_fine = alpha * lambda_prim.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    start, length = cfg.warmup_start_iter, cfg.warmup_len_iters
    if iteration <= start:
        frac = 0.0
    elif length <= 0 or iteration >= start + length:
        frac = 1.0
    else:
        frac = (iteration - start) / length
    lam_prim = frac * cfg.lambda_prim
    return replace(cfg, lambda_prim=lam_prim, lambda_fine=cfg.alpha * lam_prim)


GEN_TERMS = ("img_recon1", "img_recon2", "code_recon1", "code_recon2", "id_self",
             "id_cross", "adv_g", "prim", "fine")
DIS_TERMS = ("adv_d", "grad_penalty")


@dataclass
class LossReport:
    img_recon1: float = 0.0
    img_recon2: float = 0.0
    code_recon1: float = 0.0
    code_recon2: float = 0.0
    id_self: float = 0.0
    id_cross: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    grad_penalty: float = 0.0
    prim: float = 0.0
    fine: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def check_finite(self):
        bad = {k: v for k, v in self.as_dict().items() if not math.isfinite(v)}
        if bad:
            dump = ", ".join(f"{k}={v!r}" for k, v in self.as_dict().items())
            raise FloatingPointError(f"non-finite loss terms {sorted(bad)}; all terms: {dump}")


def total_loss(terms: dict, weights: LossWeights):
    """Weighted generator objective; ``terms`` may hold tensors or floats, missing terms count as 0."""
    t = {k: terms.get(k, 0.0) for k in GEN_TERMS}
    return (weights.lambda_img * (t["img_recon1"] + t["img_recon2"])
            + (t["code_recon1"] + t["code_recon2"])
            + t["id_self"] + weights.lambda_id * t["id_cross"]
            + t["adv_g"]
            + weights.lambda_prim * t["prim"] + weights.lambda_fine * t["fine"])


def dis_total(terms: dict):
    return terms.get("adv_d", 0.0) + terms.get("grad_penalty", 0.0)


def write_metrics(handle, iteration: int, values: dict[str, float]):
    """Append ``iter<TAB>term<TAB>value`` lines; values use repr so logs compare bit-exactly."""
    for key, value in values.items():
        handle.write(f"{iteration}\t{key}\t{float(value)!r}\n")


def read_metrics(path) -> list[tuple[int, str, float]]:
    rows = []
    with open(path) as handle:
        for line in handle:
            it, term, value = line.rstrip("\n").split("\t")
            rows.append((int(it), term, float(value)))
    return rows
