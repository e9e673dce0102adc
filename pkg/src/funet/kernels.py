"""Hot inner kernels for convolution: im2col gather and col2im scatter.

Two interchangeable backends produce bitwise-identical results:

* ``numba`` -- @njit loops (default when numba imports cleanly)
* ``numpy`` -- pure-numpy strided/sliced equivalents

Selection: the ``FUNET_BACKEND`` environment variable ("numba" or "numpy"),
overridable at runtime with `set_backend`. Both paths are sequential with a
fixed accumulation order, so results are bitwise reproducible; `funet bench
--compare-backends` times one against the other.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _im2col_np(xp, kh, kw, sh, sw, dh, dw, oh, ow):
    """Gather sliding windows of padded input (B,C,Hp,Wp) into (B, C*kh*kw, oh*ow)."""
    b, c, hp, wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    shape = (b, c, kh, kw, oh, ow)
    strides = (s0, s1, s2 * dh, s3 * dw, s2 * sh, s3 * sw)
    win = np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)
    return win.reshape(b, c * kh * kw, oh * ow)


def _col2im_np(cols, hp, wp, kh, kw, sh, sw, dh, dw, oh, ow):
    """Scatter-add columns (B, C*kh*kw, oh*ow) back onto a padded (B,C,Hp,Wp) grid."""
    b = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i * dh : i * dh + sh * oh : sh, j * dw : j * dw + sw * ow : sw] += cols6[:, :, i, j]
    return out


if HAS_NUMBA:
    # single-threaded on purpose: the gather/scatter is memory-bound, and a
    # parallel region here fights the BLAS thread pool that runs the matmuls
    # right before/after it

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, sh, sw, dh, dw, oh, ow, cols):
        b, c = xp.shape[0], xp.shape[1]
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for y in range(oh):
                            iy = y * sh + i * dh
                            for x in range(ow):
                                cols[bi, row, y * ow + x] = xp[bi, ci, iy, x * sw + j * dw]

    @njit(cache=True)
    def _col2im_nb(cols, hp, wp, kh, kw, sh, sw, dh, dw, oh, ow, out):
        b, c = out.shape[0], out.shape[1]
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for y in range(oh):
                            iy = y * sh + i * dh
                            for x in range(ow):
                                out[bi, ci, iy, x * sw + j * dw] += cols[bi, row, y * ow + x]


def _resolve_default():
    name = os.environ.get("FUNET_BACKEND", "").strip().lower()
    if name == "":
        return "numba" if HAS_NUMBA else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"FUNET_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("FUNET_BACKEND=numba requested but numba is not importable")
    return name


_BACKEND = _resolve_default()


def backend_name() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Switch between 'numba' and 'numpy' kernels; returns the previous name."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend unavailable (import failed)")
    prev = _BACKEND
    _BACKEND = name
    return prev


def im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, dh: int, dw: int, oh: int, ow: int) -> np.ndarray:
    if _BACKEND == "numba":
        b, c = xp.shape[0], xp.shape[1]
        cols = np.empty((b, c * kh * kw, oh * ow), dtype=xp.dtype)
        _im2col_nb(np.ascontiguousarray(xp), kh, kw, sh, sw, dh, dw, oh, ow, cols)
        return cols
    return _im2col_np(xp, kh, kw, sh, sw, dh, dw, oh, ow)


def col2im(cols: np.ndarray, hp: int, wp: int, kh: int, kw: int, sh: int, sw: int, dh: int, dw: int, oh: int, ow: int) -> np.ndarray:
    if _BACKEND == "numba":
        b = cols.shape[0]
        c = cols.shape[1] // (kh * kw)
        out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
        _col2im_nb(np.ascontiguousarray(cols), hp, wp, kh, kw, sh, sw, dh, dw, oh, ow, out)
        return out
    return _col2im_np(cols, hp, wp, kh, kw, sh, sw, dh, dw, oh, ow)
