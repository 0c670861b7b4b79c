# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: pairwise Euclidean distances and valid 2D convolution.

Signatures and semantics mirror :mod:`siamxd._pykernels` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def pairwise_distances(double[:, ::1] A, double[:, ::1] B):
    cdef Py_ssize_t m = A.shape[0], n = B.shape[0], d = A.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                diff = A[i, k] - B[j, k]
                acc += diff * diff
            o[i, j] = sqrt(acc)
    return out


def pairwise_distances_backward(double[:, ::1] A, double[:, ::1] B,
                                double[:, ::1] dist, double[:, ::1] grad):
    cdef Py_ssize_t m = A.shape[0], n = B.shape[0], d = A.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double coef, diff
    gA_arr = np.zeros((m, d), dtype=np.float64)
    gB_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] gA = gA_arr
    cdef double[:, ::1] gB = gB_arr
    for i in range(m):
        for j in range(n):
            # d sqrt(u)/du at u == 0 is taken as 0
            if dist[i, j] == 0.0:
                continue
            coef = grad[i, j] / dist[i, j]
            for k in range(d):
                diff = coef * (A[i, k] - B[j, k])
                gA[i, k] += diff
                gB[j, k] -= diff
    return gA_arr, gB_arr


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w):
    cdef Py_ssize_t nb = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = wd - kw + 1
    cdef Py_ssize_t b, o, c, i, j, p, q
    cdef double acc
    out = np.empty((nb, c_out, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    for b in range(nb):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(c_in):
                        for p in range(kh):
                            for q in range(kw):
                                acc += x[b, c, i + p, j + q] * w[o, c, p, q]
                    y[b, o, i, j] = acc
    return out


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] grad):
    cdef Py_ssize_t nb = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    cdef Py_ssize_t b, o, c, i, j, p, q
    cdef double g
    gx_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2], x.shape[3]), dtype=np.float64)
    gw_arr = np.zeros((w.shape[0], w.shape[1], w.shape[2], w.shape[3]), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    for b in range(nb):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    g = grad[b, o, i, j]
                    if g == 0.0:
                        continue
                    for c in range(c_in):
                        for p in range(kh):
                            for q in range(kw):
                                gx[b, c, i + p, j + q] += g * w[o, c, p, q]
                                gw[o, c, p, q] += g * x[b, c, i + p, j + q]
    return gx_arr, gw_arr
