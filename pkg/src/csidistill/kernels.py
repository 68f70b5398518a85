"""Patch extraction/scatter kernels behind the convolution and pooling ops.

These are the only inner loops in the package that BLAS does not cover, so
they carry numba-jitted implementations with a pure-numpy fallback.  Set
``CSIDISTILL_NO_NUMBA=1`` to force the numpy path (it is also used
automatically when numba is unavailable).  ``benchmarks/bench_kernels.py``
compares the two.

Layout convention for an input of shape (B, C, H, W) with kernel (kh, kw),
stride (sh, sw) and zero padding (ph, pw):

    cols[b, c*kh*kw + i*kw + j, oy*ow + ox] = x[b, c, oy*sh + i - ph, ox*sw + j - pw]

with zeros outside the input.  ``scatter_patches`` is the exact adjoint
(scatter-add), so the pair is linear and self-adjoint under transposition;
both must stay deterministic (fixed loop order, no fastmath).
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("CSIDISTILL_NO_NUMBA", "").strip() not in ("", "0")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - environment without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


def out_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    """Number of full windows along one axis."""
    n = (extent + 2 * pad - kernel) // stride + 1
    if n < 1:
        raise ValueError(
            f"kernel {kernel} with stride {stride}, pad {pad} does not fit extent {extent}"
        )
    return n


@njit(cache=True)
def _extract_numba(x, kh, kw, sh, sw, ph, pw, out):
    b_n, c_n, h, w = x.shape
    ow = (w + 2 * pw - kw) // sw + 1
    oh = (h + 2 * ph - kh) // sh + 1
    for b in range(b_n):
        for c in range(c_n):
            for i in range(kh):
                for j in range(kw):
                    row = c * kh * kw + i * kw + j
                    for oy in range(oh):
                        y = oy * sh + i - ph
                        if y < 0 or y >= h:
                            continue
                        for ox in range(ow):
                            xx = ox * sw + j - pw
                            if xx < 0 or xx >= w:
                                continue
                            out[b, row, oy * ow + ox] = x[b, c, y, xx]


@njit(cache=True)
def _scatter_numba(cols, kh, kw, sh, sw, ph, pw, out):
    b_n, c_n, h, w = out.shape
    ow = (w + 2 * pw - kw) // sw + 1
    oh = (h + 2 * ph - kh) // sh + 1
    for b in range(b_n):
        for c in range(c_n):
            for i in range(kh):
                for j in range(kw):
                    row = c * kh * kw + i * kw + j
                    for oy in range(oh):
                        y = oy * sh + i - ph
                        if y < 0 or y >= h:
                            continue
                        for ox in range(ow):
                            xx = ox * sw + j - pw
                            if xx < 0 or xx >= w:
                                continue
                            out[b, c, y, xx] += cols[b, row, oy * ow + ox]


def extract_patches_numba(x, kernel, stride, pad):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    b, c, h, w = x.shape
    oh = out_size(h, kh, sh, ph)
    ow = out_size(w, kw, sw, pw)
    out = np.zeros((b, c * kh * kw, oh * ow), dtype=x.dtype)
    _extract_numba(np.ascontiguousarray(x), kh, kw, sh, sw, ph, pw, out)
    return out


def scatter_patches_numba(cols, spatial, kernel, stride, pad):
    c, h, w = spatial
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    out = np.zeros((cols.shape[0], c, h, w), dtype=cols.dtype)
    _scatter_numba(np.ascontiguousarray(cols), kh, kw, sh, sw, ph, pw, out)
    return out


def extract_patches_numpy(x, kernel, stride, pad):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    b, c, h, w = x.shape
    oh = out_size(h, kh, sh, ph)
    ow = out_size(w, kw, sw, pw)
    if ph or pw:
        padded = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        padded[:, :, ph : ph + h, pw : pw + w] = x
    else:
        padded = x
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # (b, c, oh, ow, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def scatter_patches_numpy(cols, spatial, kernel, stride, pad):
    c, h, w = spatial
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    b = cols.shape[0]
    oh = out_size(h, kh, sh, ph)
    ow = out_size(w, kw, sw, pw)
    g = cols.reshape(b, c, kh, kw, oh, ow)
    padded = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    # Within one (i, j) offset the strided slices hit distinct cells, so the
    # vectorized += below has no write collisions.
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw] += g[:, :, i, j]
    return np.ascontiguousarray(padded[:, :, ph : ph + h, pw : pw + w])


if HAVE_NUMBA and not _FORCE_NUMPY:
    extract_patches = extract_patches_numba
    scatter_patches = scatter_patches_numba
    BACKEND = "numba"
else:
    extract_patches = extract_patches_numpy
    scatter_patches = scatter_patches_numpy
    BACKEND = "numpy"
