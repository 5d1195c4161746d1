"""Swap grids, code interpolation and image output."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


@torch.no_grad()
def swap_grid(model, rows: torch.Tensor, cols: torch.Tensor):
    """Generate ``G(a_r, s_c)`` for every appearance row and structure column.

    Returns ``(tiles, mosaic)``: tiles are ``R x C x 3 x H x W``; the mosaic
    puts the structure sources along the top, the appearance sources down the
    left and leaves the corner white.
    """
    model.eval()
    r, c = len(rows), len(cols)
    a = model.encode_appearance(rows)
    s = model.encode_structure(cols)
    a_rep = a.repeat_interleave(c, dim=0)
    s_rep = s.repeat(r, 1, 1, 1)
    tiles = model.decode(a_rep, s_rep).view(r, c, *rows.shape[1:])
    _, ch, h, w = rows.shape
    mosaic = torch.ones(ch, (r + 1) * h, (c + 1) * w, dtype=rows.dtype)
    for j in range(c):
        mosaic[:, :h, (j + 1) * w:(j + 2) * w] = cols[j]
    for i in range(r):
        mosaic[:, (i + 1) * h:(i + 2) * h, :w] = rows[i]
        for j in range(c):
            mosaic[:, (i + 1) * h:(i + 2) * h, (j + 1) * w:(j + 2) * w] = tiles[i, j]
    return tiles, mosaic


def interpolation_codes(c0: torch.Tensor, c1: torch.Tensor, steps: int) -> torch.Tensor:
    """``(1 - t) c0 + t c1`` for ``steps`` evenly spaced t in [0, 1]."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    t = torch.linspace(0, 1, steps, dtype=c0.dtype).view(-1, *([1] * c0.dim()))
    return (1 - t) * c0.unsqueeze(0) + t * c1.unsqueeze(0)


@torch.no_grad()
def interpolate(model, mode: str, start: torch.Tensor, end: torch.Tensor, steps: int = 8,
                fixed: torch.Tensor | None = None) -> torch.Tensor:
    """Decode along a straight line between the codes of two images.

    ``mode="appearance"`` interpolates appearance codes and holds the
    structure of ``fixed`` (default ``start``); ``mode="structure"`` does the
    converse. Returns ``steps x 3 x H x W``.
    """
    model.eval()
    fixed = start if fixed is None else fixed
    if mode == "appearance":
        codes = interpolation_codes(model.encode_appearance(start[None])[0],
                                    model.encode_appearance(end[None])[0], steps)
        other = model.encode_structure(fixed[None]).expand(steps, -1, -1, -1)
        return model.decode(codes, other)
    if mode == "structure":
        codes = interpolation_codes(model.encode_structure(start[None])[0],
                                    model.encode_structure(end[None])[0], steps)
        other = model.encode_appearance(fixed[None]).expand(steps, -1, -1, -1)
        return model.decode(other, codes)
    raise ValueError(f"unknown interpolation mode {mode!r}")


def chroma_histogram(img: torch.Tensor, bins: int = 8) -> np.ndarray:
    """Normalised 2-D histogram of chromaticity (r/(r+g+b), g/(r+g+b)); ignores brightness."""
    arr = img.detach().double().numpy().reshape(3, -1)
    total = np.maximum(arr.sum(0), 1e-6)
    r, g = arr[0] / total, arr[1] / total
    hist, _, _ = np.histogram2d(r, g, bins=bins, range=[[0, 1], [0, 1]])
    return hist.ravel() / hist.sum()


def row_column_variance(tiles: torch.Tensor, bins: int = 8) -> tuple[float, float]:
    """Mean histogram variance along rows (fixed appearance) and along columns (fixed structure)."""
    r, c = tiles.shape[:2]
    hists = np.stack([[chroma_histogram(tiles[i, j], bins) for j in range(c)] for i in range(r)])
    row_var = hists.var(axis=1).sum(axis=-1).mean()
    col_var = hists.var(axis=0).sum(axis=-1).mean()
    return float(row_var), float(col_var)


def to_pil(img: torch.Tensor) -> Image.Image:
    arr = (img.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    return Image.fromarray(arr)


def save_image(img: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_pil(img).save(path)
    return path


def save_strip(images: torch.Tensor, path) -> Path:
    """Concatenate ``N x 3 x H x W`` images left to right."""
    return save_image(torch.cat(list(images), dim=-1), path)
