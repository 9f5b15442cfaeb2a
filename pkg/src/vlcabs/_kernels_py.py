"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` operation for operation so both backends
produce bit-identical float32 output.
"""
import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


def _axis_coords(src_n, dst_n):
    if dst_n == 1 or src_n == 1:
        pos = np.zeros(dst_n, dtype=np.float64)
    else:
        pos = np.arange(dst_n, dtype=np.float64) * (src_n - 1) / (dst_n - 1)
    lo = np.floor(pos).astype(np.intp)
    np.minimum(lo, src_n - 1, out=lo)
    hi = np.minimum(lo + 1, src_n - 1)
    return lo, hi, pos - lo


def bilinear_resize(src, dst_h, dst_w):
    src = np.asarray(src, dtype=np.float32)
    h, w = src.shape
    y0, y1, fy = _axis_coords(h, dst_h)
    x0, x1, fx = _axis_coords(w, dst_w)
    s = src.astype(np.float64)
    fx = fx[None, :]
    fy = fy[:, None]
    a = s[y0][:, x0]
    b = s[y0][:, x1]
    c = s[y1][:, x0]
    d = s[y1][:, x1]
    top = a + fx * (b - a)
    bottom = c + fx * (d - c)
    return (top + fy * (bottom - top)).astype(np.float32)


def threshold_counts(values, mask, thresholds):
    """Counts of ``values >= t`` and ``(values >= t) & mask`` per threshold."""
    v = np.asarray(values, dtype=np.float32).ravel().astype(np.float64)
    m = np.asarray(mask, dtype=bool).ravel()
    n_t = len(thresholds)
    # number of thresholds each value clears
    k = np.searchsorted(thresholds, v, side="right")
    hist = np.bincount(k, minlength=n_t + 1)
    hist_in = np.bincount(k[m], minlength=n_t + 1)
    pred = np.cumsum(hist[::-1])[::-1][1:]
    inter = np.cumsum(hist_in[::-1])[::-1][1:]
    return pred.astype(np.int64), inter.astype(np.int64)


def gelu(a):
    """tanh-approximate GELU and its derivative."""
    a = np.asarray(a, dtype=np.float64)
    a2 = a * a
    th = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
    half = 0.5 * (1.0 + th)
    grad = half + 0.5 * a * (1.0 - th * th) * _GELU_C * (1.0 + 0.134145 * a2)
    return a * half, grad
