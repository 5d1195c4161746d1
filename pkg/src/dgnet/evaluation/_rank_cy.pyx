# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ranking kernel; same contract as ``_rank_py.evaluate_rank``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def evaluate_rank(const cnp.int64_t[:, ::1] order, const cnp.int64_t[::1] q_pids,
                  const cnp.int64_t[::1] g_pids, const cnp.int64_t[::1] q_camids,
                  const cnp.int64_t[::1] g_camids, Py_ssize_t max_rank):
    cdef Py_ssize_t num_q = order.shape[0]
    cdef Py_ssize_t num_g = order.shape[1]
    cmc_arr = np.zeros((num_q, max_rank), dtype=np.float64)
    ap_arr = np.zeros(num_q, dtype=np.float64)
    valid_arr = np.zeros(num_q, dtype=np.uint8)
    cdef double[:, ::1] cmc = cmc_arr
    cdef double[::1] ap = ap_arr
    cdef cnp.uint8_t[::1] valid = valid_arr
    cdef Py_ssize_t q, i, k, g, rank, hits, first_hit
    cdef cnp.int64_t qp, qc, gp
    cdef double precision_sum

    with nogil:
        for q in range(num_q):
            qp = q_pids[q]
            qc = q_camids[q]
            rank = 0
            hits = 0
            precision_sum = 0.0
            first_hit = -1
            for i in range(num_g):
                g = order[q, i]
                gp = g_pids[g]
                if gp == -1 or (gp == qp and g_camids[g] == qc):
                    continue
                rank += 1
                if gp == qp:
                    hits += 1
                    precision_sum += <double>hits / <double>rank
                    if first_hit < 0:
                        first_hit = rank - 1
            if hits == 0:
                continue
            valid[q] = 1
            ap[q] = precision_sum / hits
            if first_hit < max_rank:
                for k in range(first_hit, max_rank):
                    cmc[q, k] = 1.0
    return cmc_arr, ap_arr, valid_arr
