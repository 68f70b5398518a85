"""Time the patch kernels' numba and numpy paths and check they agree.

Run as: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from csidistill.kernels import (
    HAVE_NUMBA,
    extract_patches_numba,
    extract_patches_numpy,
    scatter_patches_numba,
    scatter_patches_numpy,
)

CASES = [
    # (batch, channels, height, width, kernel, stride, pad), CNN-realistic
    ((64, 1, 30, 64), (3, 3), (1, 1), (1, 1)),
    ((64, 16, 30, 64), (2, 2), (2, 2), (0, 0)),
    ((256, 16, 15, 32), (3, 3), (1, 1), (1, 1)),
]

REPEATS = 20


def timeit(fn, *args):
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    if not HAVE_NUMBA:
        print("numba unavailable; only the numpy path can run")
    rng = np.random.default_rng(0)
    print(f"{'case':<34} {'op':<8} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for shape, kernel, stride, pad in CASES:
        x = rng.normal(size=shape).astype(np.float32)
        label = f"{shape} k{kernel} s{stride} p{pad}"
        t_np, cols_np = timeit(extract_patches_numpy, x, kernel, stride, pad)
        if HAVE_NUMBA:
            extract_patches_numba(x, kernel, stride, pad)  # jit warmup
            t_nb, cols_nb = timeit(extract_patches_numba, x, kernel, stride, pad)
            assert np.array_equal(cols_np, cols_nb), "extract paths disagree"
            print(f"{label:<34} {'extract':<8} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x")
        else:
            print(f"{label:<34} {'extract':<8} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}")

        spatial = shape[1:]
        g = rng.normal(size=cols_np.shape).astype(np.float32)
        t_np, grad_np = timeit(scatter_patches_numpy, g, spatial, kernel, stride, pad)
        if HAVE_NUMBA:
            scatter_patches_numba(g, spatial, kernel, stride, pad)
            t_nb, grad_nb = timeit(scatter_patches_numba, g, spatial, kernel, stride, pad)
            assert np.allclose(grad_np, grad_nb, rtol=1e-6, atol=1e-6), "scatter paths disagree"
            print(f"{label:<34} {'scatter':<8} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x")
        else:
            print(f"{label:<34} {'scatter':<8} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
