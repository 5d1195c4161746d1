"""Ranking kernel selection: the compiled extension when importable, else pure Python.

Set ``DGNET_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _rank_py

BACKEND = "python"
_kernel = _rank_py.evaluate_rank

if os.environ.get("DGNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _rank_cy
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        _kernel = _rank_cy.evaluate_rank


def evaluate_rank(order, q_pids, g_pids, q_camids, g_camids, max_rank, backend=None):
    """Dispatch to the selected kernel; ``backend`` forces ``"python"`` or ``"cython"``."""
    if backend == "python":
        fn = _rank_py.evaluate_rank
    elif backend == "cython":
        from . import _rank_cy
        fn = _rank_cy.evaluate_rank
    else:
        fn = _kernel
    as_i64 = lambda a: np.ascontiguousarray(a, dtype=np.int64)
    return fn(as_i64(order), as_i64(q_pids), as_i64(g_pids), as_i64(q_camids), as_i64(g_camids), int(max_rank))
