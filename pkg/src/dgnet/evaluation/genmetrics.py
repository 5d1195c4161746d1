"""Realism (Frechet distance over embedder features) and diversity (intra-class SSIM)."""
from __future__ import annotations

import itertools
import logging
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.signal
import torch

log = logging.getLogger(__name__)


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace of the matrix square root is taken as the sum of square roots of
    the eigenvalues of ``S1^{1/2} S2 S1^{1/2}``, which is symmetric PSD in exact
    arithmetic; negative round-off eigenvalues are clipped to zero.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    s1 = (s1 + s1.T) / 2
    s2 = (s2 + s2.T) / 2
    root1 = _psd_sqrt(s1, "sigma1")
    middle = root1 @ s2 @ root1
    evals = scipy.linalg.eigvalsh((middle + middle.T) / 2)
    _warn_negative(evals, "sigma1^1/2 sigma2 sigma1^1/2")
    tr_covmean = np.sqrt(np.clip(evals, 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_covmean)


def _warn_negative(evals, name):
    scale = max(abs(evals).max(), 1e-12)
    if evals.min() < -1e-8 * scale:
        log.warning("%s is not PSD (min eigenvalue %.3g); clipping", name, evals.min())


def _psd_sqrt(mat, name):
    evals, evecs = scipy.linalg.eigh(mat)
    _warn_negative(evals, name)
    return (evecs * np.sqrt(np.clip(evals, 0, None))) @ evecs.T


def gaussian_stats(features) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need at least two feature vectors")
    return feats.mean(axis=0), np.cov(feats, rowvar=False)


def fid_from_features(real_feats, gen_feats) -> float:
    return frechet_distance(*gaussian_stats(real_feats), *gaussian_stats(gen_feats))


@torch.no_grad()
def embed_images(embedder: Callable, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    return torch.cat([embedder(images[i:i + batch]) for i in range(0, len(images), batch)]).double().numpy()


def fid(real: torch.Tensor, gen: torch.Tensor, embedder: Callable) -> float:
    """Frechet distance between embedder features of two image sets (each N x 3 x H x W)."""
    if len(real) < 2 or len(gen) < 2:
        raise ValueError("both image sets need at least two samples")
    return fid_from_features(embed_images(embedder, real), embed_images(embedder, gen))


def teacher_embedder(teacher):
    """Penultimate features of the frozen teacher."""
    teacher.eval()
    return teacher.embed


# ---------------------------------------------------------------------------
# SSIM

SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _luminance(img) -> np.ndarray:
    arr = img.detach().cpu().double().numpy() if torch.is_tensor(img) else np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] == 3:
            arr = 0.299 * arr[0] + 0.587 * arr[1] + 0.114 * arr[2]
        elif arr.shape[0] == 1:
            arr = arr[0]
        else:
            raise ValueError(f"expected 1 or 3 channels, got {arr.shape[0]}")
    if arr.ndim != 2:
        raise ValueError(f"expected an image, got shape {arr.shape}")
    return arr


def ssim(x, y, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity on the luminance of two images (Gaussian window, valid region)."""
    a, b = _luminance(x), _luminance(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size}")
    w = gaussian_window(win_size, sigma)
    filt = lambda z: scipy.signal.correlate2d(z, w, mode="valid")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim_intra_class(groups: Iterable[Sequence]) -> float:
    """Mean pairwise SSIM within each group, averaged over groups with two or more images."""
    scores = []
    for group in groups:
        pairs = [ssim(a, b) for a, b in itertools.combinations(list(group), 2)]
        if pairs:
            scores.append(float(np.mean(pairs)))
    if not scores:
        raise ValueError("no group has two or more images")
    return float(np.mean(scores))
