"""Time the compiled ranking kernel against the pure-Python fallback.

    python3 benchmarks/bench_rank.py --queries 200 --gallery 2000

Both kernels get the same pre-sorted gallery order, so only the CMC/AP loop
is measured; the outputs are compared for exact equality.
"""
import argparse
import time

import numpy as np

from dgnet.evaluation import rank


def make_problem(n_q, n_g, ids, cams, seed):
    rng = np.random.default_rng(seed)
    dist = rng.random((n_q, n_g))
    order = np.argsort(dist, axis=1, kind="stable")
    g_pids = rng.integers(0, ids, n_g)
    g_pids[rng.random(n_g) < 0.05] = -1
    return order, rng.integers(0, ids, n_q), g_pids, rng.integers(0, cams, n_q), rng.integers(0, cams, n_g)


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--gallery", type=int, default=2000)
    p.add_argument("--ids", type=int, default=100)
    p.add_argument("--cams", type=int, default=6)
    p.add_argument("--max-rank", type=int, default=50)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    order, q_pids, g_pids, q_cams, g_cams = make_problem(args.queries, args.gallery, args.ids,
                                                         args.cams, args.seed)
    call = lambda backend: rank.evaluate_rank(order, q_pids, g_pids, q_cams, g_cams, args.max_rank,
                                              backend=backend)
    t_py, out_py = best_of(lambda: call("python"), args.repeats)
    print(f"problem: {args.queries} queries x {args.gallery} gallery, max_rank {args.max_rank}")
    print(f"python  {t_py * 1e3:10.2f} ms")
    try:
        t_cy, out_cy = best_of(lambda: call("cython"), args.repeats)
    except ImportError:
        print("cython  not built (pip install -e . --no-build-isolation with Cython available)")
        return 0
    equal = all(np.array_equal(a, b) for a, b in zip(out_py, out_cy))
    print(f"cython  {t_cy * 1e3:10.2f} ms")
    print(f"speedup {t_py / t_cy:10.1f}x   outputs identical: {equal}")
    return 0 if equal else 1


if __name__ == "__main__":
    raise SystemExit(main())
