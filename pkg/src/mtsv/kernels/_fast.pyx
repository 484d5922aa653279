# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: direct 1-D convolution and non-overlapping max pool.

Loop order keeps the innermost index contiguous in both operands so the C
compiler can vectorize. Ties in the max pool resolve to the first maximum,
matching numpy argmax.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv1d_forward(double[:, :, ::1] x, double[:, :, ::1] w, Py_ssize_t stride):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], t = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t tout = (t - k) // stride + 1
    y_arr = np.zeros((b, cout, tout), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef Py_ssize_t ib, io, ii, ik, it
    cdef double wv
    for ib in range(b):
        for io in range(cout):
            for ii in range(cin):
                for ik in range(k):
                    wv = w[io, ii, ik]
                    if stride == 1:
                        for it in range(tout):
                            y[ib, io, it] += wv * x[ib, ii, it + ik]
                    else:
                        for it in range(tout):
                            y[ib, io, it] += wv * x[ib, ii, it * stride + ik]
    return y_arr


def conv1d_backward(double[:, :, ::1] x, double[:, :, ::1] w,
                    double[:, :, ::1] gy, Py_ssize_t stride):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], t = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t tout = gy.shape[2]
    gx_arr = np.zeros((b, cin, t), dtype=np.float64)
    gw_arr = np.zeros((cout, cin, k), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t ib, io, ii, ik, it
    cdef double acc, wv
    # separate reduction (gw) and scatter (gx) passes so both vectorize
    for ib in range(b):
        for io in range(cout):
            for ii in range(cin):
                for ik in range(k):
                    acc = 0.0
                    if stride == 1:
                        for it in range(tout):
                            acc += gy[ib, io, it] * x[ib, ii, it + ik]
                    else:
                        for it in range(tout):
                            acc += gy[ib, io, it] * x[ib, ii, it * stride + ik]
                    gw[io, ii, ik] += acc
    for ib in range(b):
        for ii in range(cin):
            for io in range(cout):
                for ik in range(k):
                    wv = w[io, ii, ik]
                    if stride == 1:
                        for it in range(tout):
                            gx[ib, ii, it + ik] += wv * gy[ib, io, it]
                    else:
                        for it in range(tout):
                            gx[ib, ii, it * stride + ik] += wv * gy[ib, io, it]
    return gx_arr, gw_arr


def maxpool1d_forward(double[:, :, ::1] x, Py_ssize_t kernel):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], t = x.shape[2]
    cdef Py_ssize_t tout = t // kernel
    y_arr = np.empty((b, c, tout), dtype=np.float64)
    idx_arr = np.zeros((b, c, tout), dtype=np.int64)
    cdef double[:, :, ::1] y = y_arr
    cdef long long[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t ib, ic, it, ik, best_k
    cdef double best
    for ib in range(b):
        for ic in range(c):
            for it in range(tout):
                best = x[ib, ic, it * kernel]
                best_k = 0
                for ik in range(1, kernel):
                    if x[ib, ic, it * kernel + ik] > best:
                        best = x[ib, ic, it * kernel + ik]
                        best_k = ik
                y[ib, ic, it] = best
                idx[ib, ic, it] = best_k
    return y_arr, idx_arr


def maxpool1d_backward(double[:, :, ::1] gy, long long[:, :, ::1] idx, Py_ssize_t kernel):
    cdef Py_ssize_t b = gy.shape[0], c = gy.shape[1], tout = gy.shape[2]
    gx_arr = np.zeros((b, c, tout * kernel), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t ib, ic, it
    for ib in range(b):
        for ic in range(c):
            for it in range(tout):
                gx[ib, ic, it * kernel + idx[ib, ic, it]] = gy[ib, ic, it]
    return gx_arr
