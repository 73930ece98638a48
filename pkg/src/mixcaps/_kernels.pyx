# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im and dynamic-routing kernels (float32 and float64)."""
import numpy as np
from cython cimport floating
from libc.math cimport exp, sqrt


def im2col(floating[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1, wo = (w - k) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((n, ho, wo, k, k, c), dtype=dtype)
    cdef floating[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ki, kj, ch, r0, c0
    with nogil:
        for b in range(n):
            for i in range(ho):
                r0 = i * stride
                for j in range(wo):
                    c0 = j * stride
                    for ki in range(k):
                        for kj in range(k):
                            for ch in range(c):
                                out[b, i, j, ki, kj, ch] = x[b, r0 + ki, c0 + kj, ch]
    return out_arr


def col2im(floating[:, :, :, :, :, ::1] cols, tuple x_shape, int k, int stride):
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t ho = cols.shape[1], wo = cols.shape[2]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ki, kj, ch, r0, c0
    with nogil:
        for b in range(n):
            for i in range(ho):
                r0 = i * stride
                for j in range(wo):
                    c0 = j * stride
                    for ki in range(k):
                        for kj in range(k):
                            for ch in range(c):
                                out[b, r0 + ki, c0 + kj, ch] += cols[b, i, j, ki, kj, ch]
    return out_arr


def route(floating[:, :, :, ::1] u_hat, int iterations, double eps=1e-9):
    cdef Py_ssize_t n = u_hat.shape[0], ni = u_hat.shape[1], nj = u_hat.shape[2], d = u_hat.shape[3]
    dtype = np.float64 if floating is double else np.float32
    b_arr = np.zeros((iterations, n, ni, nj), dtype=dtype)
    c_arr = np.empty((iterations, n, ni, nj), dtype=dtype)
    a_arr = np.empty((iterations - 1, n, ni, nj), dtype=dtype)
    s_arr = np.zeros((iterations, n, nj, d), dtype=dtype)
    v_arr = np.empty((iterations, n, nj, d), dtype=dtype)
    work = np.zeros((ni, nj), dtype=np.float64)
    cdef floating[:, :, :, ::1] bh = b_arr
    cdef floating[:, :, :, ::1] ch = c_arr
    cdef floating[:, :, :, ::1] ah = a_arr
    cdef floating[:, :, :, ::1] sh = s_arr
    cdef floating[:, :, :, ::1] vh = v_arr
    cdef double[:, ::1] blog = work
    cdef Py_ssize_t bi, r, i, j, t
    cdef double m, z, q, scale, acc
    with nogil:
        for bi in range(n):
            for i in range(ni):
                for j in range(nj):
                    blog[i, j] = 0.0
            for r in range(iterations):
                for i in range(ni):
                    m = blog[i, 0]
                    for j in range(1, nj):
                        if blog[i, j] > m:
                            m = blog[i, j]
                    z = 0.0
                    for j in range(nj):
                        bh[r, bi, i, j] = <floating>blog[i, j]
                        z = z + exp(blog[i, j] - m)
                    for j in range(nj):
                        ch[r, bi, i, j] = <floating>(exp(blog[i, j] - m) / z)
                for j in range(nj):
                    for t in range(d):
                        acc = 0.0
                        for i in range(ni):
                            acc = acc + ch[r, bi, i, j] * u_hat[bi, i, j, t]
                        sh[r, bi, j, t] = <floating>acc
                    q = 0.0
                    for t in range(d):
                        q = q + sh[r, bi, j, t] * sh[r, bi, j, t]
                    scale = q / ((1.0 + q) * sqrt(q + eps * eps))
                    for t in range(d):
                        vh[r, bi, j, t] = <floating>(sh[r, bi, j, t] * scale)
                if r < iterations - 1:
                    for i in range(ni):
                        for j in range(nj):
                            acc = 0.0
                            for t in range(d):
                                acc = acc + vh[r, bi, j, t] * u_hat[bi, i, j, t]
                            ah[r, bi, i, j] = <floating>acc
                            blog[i, j] = blog[i, j] + acc
    return b_arr, c_arr, a_arr, s_arr, v_arr
