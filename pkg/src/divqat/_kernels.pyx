# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for convolution lowering and fake quantization.

Every routine here has a numpy twin in ``_kernels_py`` with the same
accumulation order, so both backends produce bit-identical results.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport rint, rintf

cnp.import_array()


def im2col(const floating[:, :, :, ::1] x, int kh, int kw, int pad, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t b, ci, i, j, y, xx, iy, ix, row, col
    for b in range(n):
        for y in range(oh):
            for xx in range(ow):
                row = (b * oh + y) * ow + xx
                for ci in range(c):
                    for i in range(kh):
                        iy = y * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(kw):
                            ix = xx * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            col = (ci * kh + i) * kw + j
                            cols[row, col] = x[b, ci, iy, ix]
    return out


def col2im(const floating[:, ::1] cols, int n, int c, int h, int w,
           int kh, int kw, int pad, int stride):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, i, j, y, xx, iy, ix, row, col
    # (i, j) outermost after (b, ci) so every pixel sums its taps in the
    # same order as the slice-add loop of the numpy backend
    for b in range(n):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    col = (ci * kh + i) * kw + j
                    for y in range(oh):
                        iy = y * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for xx in range(ow):
                            ix = xx * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            row = (b * oh + y) * ow + xx
                            dx[b, ci, iy, ix] += cols[row, col]
    return out


def fake_quant_rows(const floating[:, ::1] x, const floating[::1] scale, const floating[::1] zero_point,
                    double qmin, double qmax):
    """Quantize-dequantize each row with its own scale and zero point.

    Returns ``(y, mask)`` where ``mask`` is 1 where the rounded code lies in
    ``[qmin, qmax]`` (the straight-through pass region).
    """
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], r, k
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((rows, cols), dtype=dtype)
    m_arr = np.empty((rows, cols), dtype=np.uint8)
    cdef floating[:, ::1] y = y_arr
    cdef cnp.uint8_t[:, ::1] mask = m_arr
    cdef floating s, zp, t, lo = <floating>qmin, hi = <floating>qmax
    for r in range(rows):
        s = scale[r]
        zp = zero_point[r]
        for k in range(cols):
            t = x[r, k] / s
            t = t + zp
            if floating is float:
                t = rintf(t)
            else:
                t = rint(t)
            if t < lo:
                mask[r, k] = 0
                t = lo
            elif t > hi:
                mask[r, k] = 0
                t = hi
            else:
                mask[r, k] = 1
            t = t - zp
            y[r, k] = t * s
    return y_arr, m_arr
