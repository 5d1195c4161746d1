from .genmetrics import fid, fid_from_features, frechet_distance, ssim, ssim_intra_class, teacher_embedder
from .generation import interpolate, row_column_variance, swap_grid
from .rank import BACKEND as RANK_BACKEND
from .retrieval import RetrievalResult, extract_embedding, rank_from_distances, rank_queries

__all__ = [
    "RANK_BACKEND", "RetrievalResult", "extract_embedding", "fid", "fid_from_features",
    "frechet_distance", "interpolate", "rank_from_distances", "rank_queries",
    "row_column_variance", "ssim", "ssim_intra_class", "swap_grid", "teacher_embedder",
]
