#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--size 32] [--channels 3] [--reps 2000]

Both backends are called directly, so the OMNI_DISABLE_NUMBA flag does not
matter here.  The first numba call (JIT compile or cache load) is timed
separately and excluded from the per-call figures.
"""

import argparse
import time

import numpy as np

from omnisource import _kernels as K


def _time(fn, reps):
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def _warp_matrix(size):
    h = np.eye(3)
    h[0, 1], h[1, 0] = 0.03, -0.02
    h[:2, 2] = 0.7, -1.3
    h[2, :2] = 1e-4, -2e-4
    return h


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--channels", type=int, default=3)
    ap.add_argument("--grid", type=int, default=8)
    ap.add_argument("--reps", type=int, default=2000)
    args = ap.parse_args()
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    img = rng.random((args.size, args.size, args.channels))
    hinv = _warp_matrix(args.size)

    cases = {
        "warp_bilinear": (
            lambda: K.warp_bilinear_numpy(img, hinv, K.FILL_EDGE, 0.0),
            lambda: K.warp_bilinear_numba(img, hinv, K.FILL_EDGE, 0.0),
        ),
        "grid_features": (
            lambda: K.grid_features_numpy(img, args.grid),
            lambda: K.grid_features_numba(img, args.grid),
        ),
    }
    print(f"frame {args.size}x{args.size}x{args.channels}, grid {args.grid}, {args.reps} calls per timing")
    print(f"{'kernel':<16}{'first numba call':>18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}{'max |diff|':>13}")
    for name, (f_np, f_nb) in cases.items():
        t0 = time.perf_counter()
        out_nb = f_nb()
        first = time.perf_counter() - t0
        diff = float(np.max(np.abs(f_np() - out_nb)))
        t_np = _time(f_np, args.reps)
        t_nb = _time(f_nb, args.reps)
        print(f"{name:<16}{first * 1e3:>15.1f} ms{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.1f}x{diff:>13.1e}")


if __name__ == "__main__":
    main()
