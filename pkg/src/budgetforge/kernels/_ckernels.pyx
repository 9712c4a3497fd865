# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback.py``.

Inputs must be C-contiguous float64 arrays; the dispatcher in
``__init__.py`` takes care of that.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

DEF IDENTITY = 0
DEF RELU = 1
DEF SIGMOID = 2


cdef inline double _sigmoid(double z) nogil:
    cdef double ez
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    ez = exp(z)
    return ez / (1.0 + ez)


def layer_forward(const double[:, ::1] weight, const double[::1] bias,
                  const double[:, ::1] x, int act):
    cdef Py_ssize_t n = x.shape[0], d_in = x.shape[1], d_out = weight.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double acc
    if weight.shape[1] != d_in or bias.shape[0] != d_out:
        raise ValueError("layer_forward: shape mismatch")
    if act < 0 or act > 2:
        raise ValueError(f"unknown activation code {act}")
    pre_arr = np.empty((n, d_out), dtype=np.float64)
    out_arr = np.empty((n, d_out), dtype=np.float64)
    cdef double[:, ::1] pre = pre_arr
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(d_out):
                acc = bias[j]
                for k in range(d_in):
                    acc = acc + x[i, k] * weight[j, k]
                pre[i, j] = acc
                if act == RELU:
                    out[i, j] = 0.0 if acc <= 0 else acc  # NaN passes through
                elif act == SIGMOID:
                    out[i, j] = _sigmoid(acc)
                else:
                    out[i, j] = acc
    return pre_arr, out_arr


def layer_backward(const double[:, ::1] weight, const double[:, ::1] x,
                   const double[:, ::1] pre, const double[:, ::1] out,
                   const double[:, ::1] grad_out, int act):
    cdef Py_ssize_t n = x.shape[0], d_in = x.shape[1], d_out = weight.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double dl
    if act < 0 or act > 2:
        raise ValueError(f"unknown activation code {act}")
    gw_arr = np.zeros((d_out, d_in), dtype=np.float64)
    gb_arr = np.zeros(d_out, dtype=np.float64)
    gx_arr = np.zeros((n, d_in), dtype=np.float64)
    cdef double[:, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, ::1] gx = gx_arr
    with nogil:
        for i in range(n):
            for j in range(d_out):
                if act == RELU:
                    dl = grad_out[i, j] if pre[i, j] > 0 else 0.0
                elif act == SIGMOID:
                    dl = grad_out[i, j] * out[i, j] * (1.0 - out[i, j])
                else:
                    dl = grad_out[i, j]
                if dl == 0.0:
                    continue
                gb[j] += dl
                for k in range(d_in):
                    gw[j, k] += dl * x[i, k]
                    gx[i, k] += dl * weight[j, k]
    return gw_arr, gb_arr, gx_arr


def sq_dists(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    res_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] res = res_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    acc = acc + t * t
                res[i, j] = acc
    return res_arr


def min_dist_update(double[::1] min_sq, const double[:, ::1] points,
                    const double[::1] new_point):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1]
    cdef Py_ssize_t i, k
    cdef double acc, t
    with nogil:
        for i in range(n):
            acc = 0.0
            for k in range(d):
                t = points[i, k] - new_point[k]
                acc = acc + t * t
            if acc < min_sq[i]:
                min_sq[i] = acc


def coverage_update(double[::1] best, const double[:, ::1] points,
                    const double[::1] new_point, double inv_two_sigma_sq):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1]
    cdef Py_ssize_t i, k
    cdef double acc, t, kv
    with nogil:
        for i in range(n):
            acc = 0.0
            for k in range(d):
                t = points[i, k] - new_point[k]
                acc = acc + t * t
            kv = exp(-acc * inv_two_sigma_sq)
            if kv > best[i]:
                best[i] = kv
