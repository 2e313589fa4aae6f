"""Time the compiled and pure-Python sifting kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--n 2000] [--repeat 3]
"""

import argparse
import time

import numpy as np

from tcore import _kernels
from tcore._kernels import python as py
from tcore.sifting import nearest_neighbors, pairwise_distances


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--m", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 1, (args.n // 2, args.dim)), rng.normal(3, 1, (args.n - args.n // 2, args.dim))])
    d = pairwise_distances(x, x)
    within = d <= np.percentile(d, 5)
    indptr = np.concatenate([[0], np.cumsum(within.sum(1))]).astype(np.int64)
    indices = np.nonzero(within)[1].astype(np.int64)
    nbrs = np.stack([nearest_neighbors(x + rng.normal(0, 0.1, x.shape), np.arange(args.n), args.m) for _ in range(3)])
    same = (np.arange(args.n) < args.n // 2).astype(np.uint8)

    backends = [("python", py)]
    if _kernels.native is not None:
        backends.append(("cython", _kernels.native))
    else:
        print("compiled kernels not built; timing the fallback only")

    results = {}
    for name, mod in backends:
        t_db, lab = best_of(lambda: mod.dbscan_labels(indptr, indices, 10), args.repeat)
        t_cc, cnt = best_of(lambda: mod.consistent_counts(nbrs, same), args.repeat)
        results[name] = (lab, cnt)
        print(f"{name:7s} dbscan {t_db * 1e3:9.2f} ms   consistent_counts {t_cc * 1e3:9.2f} ms")
    if len(results) == 2:
        (la, ca), (lb, cb) = results.values()
        print("outputs identical:", bool(np.array_equal(la, lb) and np.array_equal(ca, cb)))


if __name__ == "__main__":
    main()
