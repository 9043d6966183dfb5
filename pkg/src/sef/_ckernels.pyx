# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Drop-in replacements for the functions in ``_pykernels``; loop orders are
chosen so accumulations happen in the same sequence as the numpy version.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv_output_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c * kh * kw, ho * wo))
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, row, r, s
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            r = oh * stride + i - pad
                            if r < 0 or r >= h:
                                continue
                            for ow in range(wo):
                                s = ow * stride + j - pad
                                if s >= 0 and s < w:
                                    ov[b, row, oh * wo + ow] = xv[b, ch, r, s]
    return out


def col2im(cols, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(
        n, c * kh * kw, ho * wo)
    out = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, row, r, s
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            r = oh * stride + i - pad
                            if r < 0 or r >= h:
                                continue
                            for ow in range(wo):
                                s = ow * stride + j - pad
                                if s >= 0 and s < w:
                                    ov[b, ch, r, s] += cv[b, row, oh * wo + ow]
    return out


def maxpool_forward(x, Py_ssize_t k):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1]
    cdef Py_ssize_t ho = xv.shape[2] // k, wo = xv.shape[3] // k
    out = np.empty((n, c, ho, wo))
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] ov = out
    cdef cnp.int64_t[:, :, :, ::1] iv = idx
    cdef Py_ssize_t b, ch, oh, ow, i, j, best
    cdef double m, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        m = xv[b, ch, oh * k, ow * k]
                        best = 0
                        for i in range(k):
                            for j in range(k):
                                v = xv[b, ch, oh * k + i, ow * k + j]
                                if v > m:
                                    m = v
                                    best = i * k + j
                        ov[b, ch, oh, ow] = m
                        iv[b, ch, oh, ow] = best
    return out, idx


def maxpool_backward(grad, idx, x_shape, Py_ssize_t k):
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(grad, dtype=np.float64)
    cdef cnp.int64_t[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    out = np.zeros(tuple(x_shape))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t n = gv.shape[0], c = gv.shape[1], ho = gv.shape[2], wo = gv.shape[3]
    cdef Py_ssize_t b, ch, oh, ow, best
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        best = iv[b, ch, oh, ow]
                        ov[b, ch, oh * k + best // k, ow * k + best % k] = gv[b, ch, oh, ow]
    return out
