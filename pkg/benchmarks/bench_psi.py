"""Time the RBF / sum ψ-statistics and their VJPs on the numba and numpy paths.

    python benchmarks/bench_psi.py [--n 64 128 256] [--m 32] [--d 8] [--repeat 5]

Prints one row per (family, n) with the best-of-repeat time for each path and
the max relative difference between them.
"""
import argparse
import time

import numpy as np

from structgp import _accel
from structgp.kernels import RBF, Linear, Sum, VariationalLatentPosterior


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run(k, q, Z, G1, G2):
    ps = k.psi(q, Z)
    k.psi_vjp(q, Z, 1.0, G1, G2)
    return ps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--m", type=int, default=32)
    ap.add_argument("--d", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    d, m = args.d, args.m
    rbf = RBF(d, 1.3, rng.uniform(0.5, 2.0, d))
    kernels = {"rbf": rbf, "sum": Sum(rbf, Linear(d, rng.uniform(0.1, 1.0, d)))}
    print(f"{'family':>6} {'n':>5} {'numba [ms]':>11} {'numpy [ms]':>11} {'speedup':>8} {'max rel diff':>13}")
    for name, k in kernels.items():
        for n in args.n:
            q = VariationalLatentPosterior(rng.standard_normal((n, d)), rng.uniform(0.05, 1.0, (n, d)))
            Z = rng.standard_normal((m, d))
            G1, G2 = rng.standard_normal((n, m)), rng.standard_normal((m, m))
            out = {}
            for flag in (True, False):
                prev = _accel.use_numba(flag)
                try:
                    run(k, q, Z, G1, G2)  # warm-up and JIT compile
                    out[flag] = (best_time(lambda: run(k, q, Z, G1, G2), args.repeat), run(k, q, Z, G1, G2))
                finally:
                    _accel.use_numba(prev)
            (t_nb, a), (t_np, b) = out[True], out[False]
            diff = max(np.max(np.abs(a.psi1 - b.psi1)) / np.max(np.abs(b.psi1)),
                       np.max(np.abs(a.psi2 - b.psi2)) / np.max(np.abs(b.psi2)))
            print(f"{name:>6} {n:>5} {1e3 * t_nb:>11.2f} {1e3 * t_np:>11.2f} {t_np / t_nb:>8.2f} {diff:>13.1e}")


if __name__ == "__main__":
    main()
