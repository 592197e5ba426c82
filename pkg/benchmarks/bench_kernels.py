"""Timing comparison of the numba kernels against the pure-numpy fallback.

Runs each compute kernel on shapes representative of desk-scale training and
prints a table of per-call times and speedups. The numba path is imported
directly (ignoring DCM_NUMBA) so both backends are always measured; outputs
are cross-checked before timing.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from dcmdehaze.kernels import numba_backend, numpy_backend


def best_of(fn, args, repeats):
    fn(*args)  # warm-up (and JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def build_cases(rng):
    x_small = rng.standard_normal((2, 3, 64, 64), dtype=np.float32)
    x_mid = rng.standard_normal((2, 16, 64, 64), dtype=np.float32)
    x_deep = rng.standard_normal((2, 64, 16, 16), dtype=np.float32)
    w5 = rng.standard_normal((64, 5, 5), dtype=np.float32)
    w7 = rng.standard_normal((64, 7, 7), dtype=np.float32)

    cases = [
        ("im2col 2x3x64x64 k7", "im2col", (x_small, 7, 7, 1, 1)),
        ("im2col 2x16x64x64 k3", "im2col", (x_mid, 3, 3, 1, 1)),
        ("im2col 2x16x64x64 k3 s2", "im2col", (x_mid, 3, 3, 2, 2)),
        ("depthwise fwd 2x64x16x16 k5", "depthwise_forward", (x_deep, w5)),
        ("depthwise fwd 2x64x16x16 k7", "depthwise_forward", (x_deep, w7)),
    ]

    # col2im reverses im2col on the mid-size activation.
    cols = numpy_backend.im2col(x_mid, 3, 3, 1, 1)
    b, c, h, w = x_mid.shape
    oh = ow = h - 2
    cases.append(("col2im 2x16x64x64 k3", "col2im",
                  (cols, b, c, h, w, 3, 3, 1, 1, oh, ow)))

    g = rng.standard_normal((2, 64, 12, 10), dtype=np.float32)
    xp = rng.standard_normal((2, 64, 16, 14), dtype=np.float32)
    w_grad = rng.standard_normal((64, 5, 5), dtype=np.float32)
    cases.append(("depthwise wgrad 2x64x16x14 k5", "depthwise_weight_grad",
                  (xp, g, 5, 5)))
    cases.append(("depthwise igrad 2x64x16x14 k5", "depthwise_input_grad",
                  (g, w_grad, 16, 14)))
    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20,
                        help="timed repetitions per kernel (best-of)")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = build_cases(rng)

    for label, name, call_args in cases:
        got = getattr(numba_backend, name)(*call_args)
        want = getattr(numpy_backend, name)(*call_args)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-4,
                                   err_msg=label)

    width = max(len(label) for label, _, _ in cases)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for label, name, call_args in cases:
        t_np = best_of(getattr(numpy_backend, name), call_args, args.repeats)
        t_nb = best_of(getattr(numba_backend, name), call_args, args.repeats)
        print(f"{label:<{width}}  {t_np * 1e3:>8.3f}ms  {t_nb * 1e3:>8.3f}ms"
              f"  {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
