"""Benchmark the jitted conv kernels against the pure-numpy fallback.

Runs both backends on the shapes that dominate training and prints a
timing table. The numba path is also what you get by default at runtime;
set TINYSTYLE_BACKEND=numpy to force the fallback without touching code.

    python benchmarks/bench_conv.py [--reps N]
"""

import argparse
import time

import numpy as np

from tinystyle.autodiff import kernels

SHAPES = [
    # (batch, c_in, h, w, c_out)
    (8, 32, 4, 4, 32),
    (8, 32, 8, 8, 16),
    (8, 16, 16, 16, 8),
    (16, 64, 16, 16, 32),
    (4, 64, 32, 32, 32),
    (2, 32, 64, 64, 16),
]


def _time(fn, args, reps):
    fn(*args)  # warm-up / jit compile
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps * 1e3


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=30)
    args = parser.parse_args()

    impls = {
        "numba": (kernels._numba_conv3x3, kernels._numba_conv3x3_wgrad),
        "numpy": (kernels._numpy_conv3x3, kernels._numpy_conv3x3_wgrad),
    }

    rng = np.random.default_rng(0)
    print(f"{'shape':<26} {'MMAC':>7}  "
          f"{'fwd numba':>10} {'fwd numpy':>10}  "
          f"{'wgrad numba':>11} {'wgrad numpy':>11}   (ms)")
    for n, c, h, w, co in SHAPES:
        x = rng.standard_normal((n, c, h, w), dtype=np.float32)
        k = rng.standard_normal((co, c, 3, 3), dtype=np.float32)
        gy = rng.standard_normal((n, co, h, w), dtype=np.float32)

        ref_f = impls["numpy"][0](x, k)
        ref_w = impls["numpy"][1](x, gy)
        jit_f = impls["numba"][0](x, k)
        jit_w = impls["numba"][1](x, gy)
        scale_f = max(1e-9, np.abs(ref_f).max())
        scale_w = max(1e-9, np.abs(ref_w).max())
        assert np.abs(jit_f - ref_f).max() / scale_f < 1e-4, "forward mismatch"
        assert np.abs(jit_w - ref_w).max() / scale_w < 1e-4, "wgrad mismatch"

        row = {name: (_time(fns[0], (x, k), args.reps),
                      _time(fns[1], (x, gy), args.reps))
               for name, fns in impls.items()}
        macs = n * c * h * w * co * 9 / 1e6
        print(f"n{n} c{c} {h}x{w} co{co}".ljust(26)
              + f" {macs:7.1f}  "
              + f"{row['numba'][0]:10.3f} {row['numpy'][0]:10.3f}  "
              + f"{row['numba'][1]:11.3f} {row['numpy'][1]:11.3f}")


if __name__ == "__main__":
    main()
