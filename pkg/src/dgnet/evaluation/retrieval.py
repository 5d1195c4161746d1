"""Test-time embeddings and single-query CMC / mAP ranking."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .rank import evaluate_rank

log = logging.getLogger(__name__)


@dataclass
class RetrievalResult:
    cmc: np.ndarray  # cmc[k - 1] = Rank@k
    map: float
    ap: np.ndarray  # per valid query
    valid: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> dict[str, float]:
        out = {f"rank{k}": self.rank(k) for k in (1, 5, 10) if len(self.cmc)}
        out["mAP"] = float(self.map)
        out["num_valid_queries"] = int(self.valid.sum())
        return out


@torch.no_grad()
def extract_embedding(model, img: torch.Tensor, beta: float = 0.5, batch: int = 64) -> torch.Tensor:
    """``concat(f_prim, beta * f_fine)`` for one image (3xHxW) or a batch."""
    model.eval()
    single = img.dim() == 3
    x = img.unsqueeze(0) if single else img
    out = torch.cat([model.embed(x[i:i + batch], beta) for i in range(0, len(x), batch)])
    return out[0] if single else out


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def euclidean_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distance between L2-normalised rows."""
    q, g = l2_normalize(query), l2_normalize(gallery)
    sq = (q ** 2).sum(1)[:, None] + (g ** 2).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(sq, 0.0))


def rank_queries(q_emb, q_pids, q_cams, g_emb, g_pids, g_cams, max_rank: int = 50,
                 backend: str | None = None) -> RetrievalResult:
    """Single-query protocol: same-id/same-camera and junk (-1) gallery entries are ignored.

    Queries without any valid match are skipped with a warning.
    """
    dist = euclidean_distances(np.asarray(q_emb), np.asarray(g_emb))
    return rank_from_distances(dist, q_pids, q_cams, g_pids, g_cams, max_rank, backend)


def rank_from_distances(dist, q_pids, q_cams, g_pids, g_cams, max_rank: int = 50,
                        backend: str | None = None) -> RetrievalResult:
    dist = np.asarray(dist)
    max_rank = max(1, min(max_rank, dist.shape[1]))
    order = np.argsort(dist, axis=1, kind="stable")
    cmc, ap, valid = evaluate_rank(order, q_pids, g_pids, q_cams, g_cams, max_rank, backend=backend)
    valid = valid.astype(bool)
    skipped = int((~valid).sum())
    if skipped:
        log.warning("%d of %d queries have no valid gallery match and were skipped", skipped, len(valid))
    if not valid.any():
        return RetrievalResult(np.zeros(max_rank), 0.0, np.zeros(0), valid)
    return RetrievalResult(cmc[valid].mean(axis=0), float(ap[valid].mean()), ap[valid], valid)


def export_embeddings(path, emb, records) -> tuple[Path, Path]:
    """Write ``<path>.npy`` and a ``<path>.manifest.tsv`` sidecar (path, identity, camera)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = path.with_suffix(".npy")
    np.save(matrix, np.asarray(emb, dtype=np.float32))
    manifest = path.with_suffix(".manifest.tsv")
    manifest.write_text("".join(f"{r.path}\t{r.raw_identity}\t{r.camera}\n" for r in records))
    return matrix, manifest


def load_embeddings(path):
    path = Path(path)
    emb = np.load(path.with_suffix(".npy"))
    rows = [line.split("\t") for line in path.with_suffix(".manifest.tsv").read_text().splitlines()]
    return emb, [r[0] for r in rows], np.array([int(r[1]) for r in rows]), np.array([int(r[2]) for r in rows])


def write_report(path, metrics: dict) -> str:
    """Dump ``metrics`` as JSON next to a plain-text table; returns the table."""
    path = Path(path)
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    width = max(len(k) for k in metrics)
    lines = [f"{'metric':<{width}}  value", "-" * (width + 12)]
    for key in sorted(metrics):
        value = metrics[key]
        text = f"{value:.4f}" if isinstance(value, float) else str(value)
        lines.append(f"{key:<{width}}  {text}")
    table = "\n".join(lines) + "\n"
    path.with_suffix(".txt").write_text(table)
    return table
