"""Pure-Python ranking kernel, used when the compiled extension is unavailable."""
import numpy as np


def evaluate_rank(order, q_pids, g_pids, q_camids, g_camids, max_rank):
    """Per-query CMC rows and average precision from a pre-sorted gallery order.

    ``order[q]`` lists gallery indices by ascending distance. Gallery entries
    with identity -1, or with the query's identity and camera, are skipped.
    Returns ``(cmc, ap, valid)`` with shapes ``(Q, max_rank)``, ``(Q,)``, ``(Q,)``;
    rows of invalid queries (no relevant gallery entry) are zero.
    """
    num_q = order.shape[0]
    cmc = np.zeros((num_q, max_rank), dtype=np.float64)
    ap = np.zeros(num_q, dtype=np.float64)
    valid = np.zeros(num_q, dtype=np.uint8)
    for q in range(num_q):
        qp, qc = q_pids[q], q_camids[q]
        rank = 0
        hits = 0
        precision_sum = 0.0
        first_hit = -1
        for g in order[q]:
            gp = g_pids[g]
            if gp == -1 or (gp == qp and g_camids[g] == qc):
                continue
            rank += 1
            if gp == qp:
                hits += 1
                precision_sum += hits / rank
                if first_hit < 0:
                    first_hit = rank - 1
        if hits == 0:
            continue
        valid[q] = 1
        ap[q] = precision_sum / hits
        if first_hit < max_rank:
            cmc[q, first_hit:] = 1.0
    return cmc, ap, valid
