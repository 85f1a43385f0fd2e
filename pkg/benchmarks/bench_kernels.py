"""Timing comparison of the compiled and numpy kernel backends.

Loads both implementations in one process (ignoring VIDPOOL_BACKEND) and
times the three hot kernels on synthetic workloads.  Reports best-of-N
wall times, the speedup, and the max absolute disagreement.

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --frames 20000 --clusters 256 --dim 64
"""

import argparse
import sys
import time

import numpy as np

from vidpool import _kernels_np
from vidpool.prng import Stream

try:
    from vidpool import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workload(t, k, d, seed):
    s = Stream(seed, "bench")
    frames = s.normal((t, d))
    means = s.normal((k, d))
    inv_var = 1.0 / (np.abs(s.normal((k, d))) + 0.5)
    log_const = s.normal(k)
    lj = _kernels_np.diag_log_joint(frames, means, inv_var, log_const)
    post, _ = _kernels_np.posteriors_from_log_joint(lj)
    return frames, means, inv_var, log_const, np.ascontiguousarray(lj), post


def run(t, k, d, repeats, seed):
    frames, means, inv_var, log_const, lj, post = workload(t, k, d, seed)
    cases = [
        ("diag_log_joint", lambda m: m.diag_log_joint(frames, means, inv_var, log_const)),
        ("posteriors", lambda m: m.posteriors_from_log_joint(lj)[0]),
        ("accumulate", lambda m: m.accumulate_stats(post, frames, True)[1]),
    ]
    print(f"\nT={t} K={k} D={d} (best of {repeats})")
    print(f"{'kernel':<16} {'numpy':>10} {'compiled':>10} {'speedup':>8} {'max diff':>10}")
    for name, call in cases:
        t_np = best_of(lambda: call(_kernels_np), repeats)
        if _kernels is None:
            print(f"{name:<16} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8} {'-':>10}")
            continue
        t_c = best_of(lambda: call(_kernels), repeats)
        diff = float(np.max(np.abs(call(_kernels) - call(_kernels_np))))
        print(f"{name:<16} {t_np * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms {t_np / t_c:>7.1f}x {diff:>10.1e}")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--frames", type=int, default=10000)
    parser.add_argument("--clusters", type=int, default=256)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not importable; timing numpy only", file=sys.stderr)
    run(500, 16, 16, args.repeats, args.seed)
    run(args.frames, args.clusters, args.dim, args.repeats, args.seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
