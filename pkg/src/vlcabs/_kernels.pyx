# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline void _coord(Py_ssize_t i, Py_ssize_t src_n, Py_ssize_t dst_n,
                        Py_ssize_t *lo, Py_ssize_t *hi, double *frac) noexcept nogil:
    cdef double pos
    if dst_n == 1 or src_n == 1:
        pos = 0.0
    else:
        pos = <double>i * (src_n - 1) / (dst_n - 1)
    lo[0] = <Py_ssize_t>floor(pos)
    if lo[0] > src_n - 1:
        lo[0] = src_n - 1
    hi[0] = lo[0] + 1
    if hi[0] > src_n - 1:
        hi[0] = src_n - 1
    frac[0] = pos - lo[0]


def bilinear_resize(src, Py_ssize_t dst_h, Py_ssize_t dst_w):
    cdef const float[:, :] s = np.ascontiguousarray(src, dtype=np.float32)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1]
    out = np.empty((dst_h, dst_w), dtype=np.float32)
    cdef float[:, :] o = out
    cdef Py_ssize_t y, x, y0, y1
    cdef double fy
    cdef Py_ssize_t[:] x0 = np.empty(dst_w, dtype=np.intp)
    cdef Py_ssize_t[:] x1 = np.empty(dst_w, dtype=np.intp)
    cdef double[:] fx = np.empty(dst_w, dtype=np.float64)
    cdef double a, b, c, d, top, bottom
    with nogil:
        for x in range(dst_w):
            _coord(x, w, dst_w, &x0[x], &x1[x], &fx[x])
        for y in range(dst_h):
            _coord(y, h, dst_h, &y0, &y1, &fy)
            for x in range(dst_w):
                a = s[y0, x0[x]]
                b = s[y0, x1[x]]
                c = s[y1, x0[x]]
                d = s[y1, x1[x]]
                top = a + fx[x] * (b - a)
                bottom = c + fx[x] * (d - c)
                o[y, x] = <float>(top + fy * (bottom - top))
    return out


def threshold_counts(values, mask, thresholds):
    cdef const float[:] v = np.ascontiguousarray(values, dtype=np.float32).ravel()
    cdef const cnp.uint8_t[:] m = np.ascontiguousarray(mask, dtype=bool).ravel().view(np.uint8)
    cdef const double[:] t = np.ascontiguousarray(thresholds, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], n_t = t.shape[0]
    hist = np.zeros(n_t + 1, dtype=np.int64)
    hist_in = np.zeros(n_t + 1, dtype=np.int64)
    cdef cnp.int64_t[:] hv = hist
    cdef cnp.int64_t[:] hi = hist_in
    cdef Py_ssize_t i, lo, up, mid
    cdef double x
    with nogil:
        for i in range(n):
            x = v[i]
            # first index with t > x, i.e. count of thresholds <= x
            lo = 0
            up = n_t
            while lo < up:
                mid = (lo + up) >> 1
                if t[mid] <= x:
                    lo = mid + 1
                else:
                    up = mid
            hv[lo] += 1
            if m[i]:
                hi[lo] += 1
    pred = np.cumsum(hist[::-1])[::-1][1:]
    inter = np.cumsum(hist_in[::-1])[::-1][1:]
    return pred.astype(np.int64), inter.astype(np.int64)

