"""Compare the compiled and pure-Python companion scan kernels.

    python3 benchmarks/bench_scan.py [--repeat 5]

Times the forward scan and its backward pass on a few shapes typical of
training (batch 64, lookback 84, width 8, order 4) and prints one row per
shape and backend.
"""
import argparse
import timeit

import numpy as np

from spacetime_robust import kernels

SHAPES = [(64, 84, 8, 4), (256, 84, 8, 4), (64, 336, 8, 8), (1, 2000, 1, 4)]


def bench(backend, B, L, D, n, repeat):
    k = kernels.get_backend(backend)
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.3 / n, (D, n))
    u = rng.normal(size=(B, L, D))
    X = k.scan_states(a, u)
    gX = rng.normal(size=X.shape)
    fwd = min(timeit.repeat(lambda: k.scan_states(a, u), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: k.scan_states_backward(a, X, gX), number=1, repeat=repeat))
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the fallback is timed")
    print(f"{'shape (B, L, D, n)':<22}{'backend':<9}{'forward ms':>12}{'backward ms':>13}{'speedup':>9}")
    for shape in SHAPES:
        base = None
        for name in backends:
            fwd, bwd = bench(name, *shape, args.repeat)
            total = fwd + bwd
            base = base or total
            print(f"{str(shape):<22}{name:<9}{fwd * 1e3:>12.2f}{bwd * 1e3:>13.2f}{base / total:>8.1f}x")


if __name__ == "__main__":
    main()
