# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; same signatures as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()

BACKEND = "cython"

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n * h * w, c * 9), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, di, dj, row, yy, xx, col0
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    for ch in range(c):
                        col0 = ch * 9
                        for di in range(3):
                            yy = i + di - 1
                            if yy < 0 or yy >= h:
                                continue
                            for dj in range(3):
                                xx = j + dj - 1
                                if 0 <= xx < w:
                                    cols[row, col0 + di * 3 + dj] = x[b, ch, yy, xx]
    return out


def col2im3x3(cols_in, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w):
    return _col2im(np.ascontiguousarray(cols_in), n, c, h, w)


def _col2im(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, i, j, di, dj, row, yy, xx, col0
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    for ch in range(c):
                        col0 = ch * 9
                        for di in range(3):
                            yy = i + di - 1
                            if yy < 0 or yy >= h:
                                continue
                            for dj in range(3):
                                xx = j + dj - 1
                                if 0 <= xx < w:
                                    x[b, ch, yy, xx] += cols[row, col0 + di * 3 + dj]
    return out


def maxpool2x2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, i, j
    cdef real best, v
    cdef cnp.int8_t k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ch, 2 * i, 2 * j]
                        k = 0
                        v = x[b, ch, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, ch, i, j] = best
                        arg[b, ch, i, j] = k
    return out_arr, arg_arr


def maxpool2x2_backward(real[:, :, :, ::1] dout, cnp.int8_t[:, :, :, ::1] arg, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef int k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        k = arg[b, ch, i, j]
                        dx[b, ch, 2 * i + (k >> 1), 2 * j + (k & 1)] = dout[b, ch, i, j]
    return dx_arr


cdef inline double _cubic(double t) nogil:
    # Keys kernel with a = -0.5
    t = fabs(t)
    if t <= 1.0:
        return (1.5 * t - 2.5) * t * t + 1.0
    if t < 2.0:
        return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    return 0.0


cdef void _taps(Py_ssize_t n_out, Py_ssize_t n_in, double start, double step, bint clamp,
                Py_ssize_t[:, ::1] idx, double[:, ::1] wt) nogil:
    cdef Py_ssize_t j, k, base, ii
    cdef double u, frac
    for j in range(n_out):
        u = start + step * j
        base = <Py_ssize_t>floor(u)
        frac = u - base
        for k in range(4):
            ii = base + k - 1
            wt[j, k] = _cubic(frac - (k - 1))
            if ii < 0 or ii >= n_in:
                if clamp:
                    ii = 0 if ii < 0 else n_in - 1
                else:
                    ii = -1
            idx[j, k] = ii


def resample_bicubic(img_in, Py_ssize_t out_h, Py_ssize_t out_w, double y_start, double y_step,
                     double x_start, double x_step, bint clamp):
    cdef double[:, ::1] img = np.ascontiguousarray(img_in, dtype=np.float64)
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    yi_arr = np.empty((out_h, 4), dtype=np.intp)
    yw_arr = np.empty((out_h, 4), dtype=np.float64)
    xi_arr = np.empty((out_w, 4), dtype=np.intp)
    xw_arr = np.empty((out_w, 4), dtype=np.float64)
    cdef Py_ssize_t[:, ::1] yi = yi_arr, xi = xi_arr
    cdef double[:, ::1] yw = yw_arr, xw = xw_arr
    tmp_arr = np.zeros((h, out_w), dtype=np.float64)
    out_arr = np.zeros((out_h, out_w), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr, out = out_arr
    cdef Py_ssize_t r, i, j, k, ii
    cdef double acc
    with nogil:
        _taps(out_h, h, y_start, y_step, clamp, yi, yw)
        _taps(out_w, w, x_start, x_step, clamp, xi, xw)
        for r in range(h):
            for i in range(out_w):
                acc = 0.0
                for k in range(4):
                    ii = xi[i, k]
                    if ii >= 0:
                        acc = acc + xw[i, k] * img[r, ii]
                tmp[r, i] = acc
        for j in range(out_h):
            for k in range(4):
                ii = yi[j, k]
                if ii < 0:
                    continue
                for i in range(out_w):
                    out[j, i] += yw[j, k] * tmp[ii, i]
    return out_arr


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) nogil:
    cdef Py_ssize_t m = i % (2 * n)
    if m < 0:
        m += 2 * n
    if m >= n:
        m = 2 * n - 1 - m
    return m


def convolve1d_reflect(img_in, kernel_in, int axis):
    cdef double[:, ::1] img = np.ascontiguousarray(img_in, dtype=np.float64)
    cdef double[::1] ker = np.ascontiguousarray(kernel_in, dtype=np.float64)
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], r = ker.shape[0] // 2
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, n
    cdef Py_ssize_t[::1] map_
    cdef double acc
    n = h if axis == 0 else w
    map_arr = np.empty(n + 2 * r, dtype=np.intp)
    map_ = map_arr
    for k in range(n + 2 * r):
        map_[k] = _reflect(k - r, n)
    with nogil:
        if axis == 0:
            for i in range(h):
                for k in range(2 * r + 1):
                    for j in range(w):
                        out[i, j] += ker[k] * img[map_[i + k], j]
        else:
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for k in range(2 * r + 1):
                        acc = acc + ker[k] * img[i, map_[j + k]]
                    out[i, j] = acc
    return out_arr
