# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled GMM kernels: fused loops over (frame, cluster, dim).

Contracts mirror ``_kernels_np``; these versions avoid the large
intermediate products the numpy expressions materialize and walk each
frame row once per cluster.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

BACKEND_NAME = "c"


def diag_log_joint(
    double[:, ::1] frames not None,
    double[:, ::1] means not None,
    double[:, ::1] inv_var not None,
    double[::1] log_const not None,
):
    cdef Py_ssize_t t_n = frames.shape[0]
    cdef Py_ssize_t d_n = frames.shape[1]
    cdef Py_ssize_t k_n = means.shape[0]
    out_arr = np.empty((t_n, k_n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t t, k, i
    cdef double acc, diff
    for t in range(t_n):
        for k in range(k_n):
            acc = 0.0
            for i in range(d_n):
                diff = frames[t, i] - means[k, i]
                acc += diff * diff * inv_var[k, i]
            out[t, k] = log_const[k] - 0.5 * acc
    return out_arr


def posteriors_from_log_joint(double[:, ::1] log_joint not None):
    cdef Py_ssize_t t_n = log_joint.shape[0]
    cdef Py_ssize_t k_n = log_joint.shape[1]
    post_arr = np.empty((t_n, k_n), dtype=np.float64)
    lse_arr = np.empty(t_n, dtype=np.float64)
    cdef double[:, ::1] post = post_arr
    cdef double[::1] lse = lse_arr
    cdef Py_ssize_t t, k
    cdef double m, denom
    for t in range(t_n):
        m = log_joint[t, 0]
        for k in range(1, k_n):
            if log_joint[t, k] > m:
                m = log_joint[t, k]
        denom = 0.0
        for k in range(k_n):
            post[t, k] = exp(log_joint[t, k] - m)
            denom += post[t, k]
        for k in range(k_n):
            post[t, k] /= denom
        lse[t] = m + log(denom)
    return post_arr, lse_arr


def accumulate_stats(
    double[:, ::1] posteriors not None,
    double[:, ::1] frames not None,
    bint want_sx2_diag,
):
    cdef Py_ssize_t t_n = posteriors.shape[0]
    cdef Py_ssize_t k_n = posteriors.shape[1]
    cdef Py_ssize_t d_n = frames.shape[1]
    n_arr = np.zeros(k_n, dtype=np.float64)
    sx_arr = np.zeros((k_n, d_n), dtype=np.float64)
    sx2_arr = np.zeros((k_n, d_n), dtype=np.float64) if want_sx2_diag else None
    cdef double[::1] n = n_arr
    cdef double[:, ::1] sx = sx_arr
    cdef double[:, ::1] sx2
    cdef Py_ssize_t t, k, i
    cdef double p, x
    if want_sx2_diag:
        sx2 = sx2_arr
        for t in range(t_n):
            for k in range(k_n):
                p = posteriors[t, k]
                n[k] += p
                for i in range(d_n):
                    x = frames[t, i]
                    sx[k, i] += p * x
                    sx2[k, i] += p * x * x
    else:
        for t in range(t_n):
            for k in range(k_n):
                p = posteriors[t, k]
                n[k] += p
                for i in range(d_n):
                    sx[k, i] += p * frames[t, i]
    return n_arr, sx_arr, sx2_arr
