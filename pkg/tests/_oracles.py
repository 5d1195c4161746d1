"""Reference computations shared by the unit tests and the acceptance suite."""
import numpy as np
import torch

from dgnet.config import desk_profile
from dgnet.networks import DGNet
from dgnet.objectives import grad_penalty, img_recon_loss

# Below this analytic magnitude the entry is treated as a zero gradient and
# resampled: a central difference cannot resolve a relative error there.
GRAD_FLOOR = 1e-6
# One-sided slopes that disagree by more than this (relative) mean the probe
# straddles a ReLU / |x| / max-pool kink, where no finite difference is valid.
KINK_TOL = 1e-3


def finite_difference_errors(loss_fn, params, count=16, seed=0, eps=1e-6, stats=None):
    """Relative error between autograd and central differences on ``count`` sampled scalars.

    ``loss_fn`` takes no arguments and returns a scalar tensor built from
    ``params``. Samples are redrawn when the analytic gradient is below
    GRAD_FLOOR or when the left and right difference quotients disagree; the
    latter test never looks at the analytic value, so it cannot mask a wrong
    gradient. ``stats``, if given, receives the number of redrawn kink probes.
    """
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    errors = []
    kinks = tries = 0
    # writes go through .data; no no_grad here because R1 differentiates inside its forward
    base = loss_fn().item()
    while len(errors) < count:
        tries += 1
        if tries > 200 * count:
            raise RuntimeError("could not find enough smooth parameters with a non-zero gradient")
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = int(rng.integers(params[k].numel()))
        analytic = grads[k].flatten()[idx].item()
        if abs(analytic) < GRAD_FLOOR:
            continue
        flat = params[k].data.view(-1)
        orig = flat[idx].item()
        flat[idx] = orig + eps
        up = loss_fn().item()
        flat[idx] = orig - eps
        down = loss_fn().item()
        flat[idx] = orig
        right, left = (up - base) / eps, (base - down) / eps
        if abs(right - left) > KINK_TOL * max(abs(right), abs(left)):
            kinks += 1
            continue
        numeric = (up - down) / (2 * eps)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    if stats is not None:
        stats["kinks"] = kinks
    return errors


def float64_desk_model(seed=0):
    torch.manual_seed(seed)
    return DGNet(desk_profile().net).double().eval()


def generator_gradcheck(seed=0, count=16):
    """Check an image reconstruction loss through decode(E_a(x1), E_s(x2)) at 64x32."""
    model = float64_desk_model(seed)
    gen = torch.Generator().manual_seed(seed)
    x1 = torch.rand(2, 3, 64, 32, generator=gen, dtype=torch.float64)
    x2 = torch.rand(2, 3, 64, 32, generator=gen, dtype=torch.float64)
    loss = lambda: img_recon_loss(x1, model.decode(model.encode_appearance(x1), model.encode_structure(x2)))
    params = (list(model.app_encoder.backbone.parameters()) + list(model.struct_encoder.parameters())
              + list(model.decoder.parameters()))
    return finite_difference_errors(loss, params, count, seed)


def r1_gradcheck(seed=0, count=16):
    """Check the R1 penalty with respect to discriminator weights at 64x32."""
    model = float64_desk_model(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    real = torch.rand(2, 3, 64, 32, generator=gen, dtype=torch.float64)
    loss = lambda: grad_penalty(model.discriminator, real, gamma=10.0)
    return finite_difference_errors(loss, list(model.discriminator.parameters()), count, seed)


def brute_force(dist, q_pids, q_cams, g_pids, g_cams, max_rank):
    """Enumerate every query by hand: sort by (distance, index), drop ignored entries, count hits."""
    cmcs, aps = [], []
    for q in range(len(q_pids)):
        ranked = sorted(range(len(g_pids)), key=lambda g: (dist[q][g], g))
        kept = [g for g in ranked
                if g_pids[g] != -1 and not (g_pids[g] == q_pids[q] and g_cams[g] == q_cams[q])]
        relevant = [g_pids[g] == q_pids[q] for g in kept]
        if not any(relevant):
            continue
        precisions = [sum(relevant[:k + 1]) / (k + 1) for k in range(len(kept)) if relevant[k]]
        aps.append(sum(precisions) / len(precisions))
        first = relevant.index(True)
        cmcs.append([1.0 if first <= k else 0.0 for k in range(max_rank)])
    if not aps:
        return None, None, []
    return np.mean(cmcs, axis=0), float(np.mean(aps)), aps


def random_instance(rng, n_q, n_g, ids, cams):
    # integer distances force plenty of ties
    dist = rng.integers(0, 6, size=(n_q, n_g)).astype(np.float64)
    q_pids = rng.integers(0, ids, n_q)
    g_pids = rng.integers(-1, ids, n_g)
    return dist, q_pids, rng.integers(0, cams, n_q), g_pids, rng.integers(0, cams, n_g)
