# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused time-loop kernels for the selective-scan recurrence.

Same contract as scan_py: h[t] = a[t] * h[t-1] + x[t], plus the exact
reverse-mode pass. Supports float32 and float64 via the fused type.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def scan_forward(a_arr, x_arr):
    a_arr = np.ascontiguousarray(a_arr)
    x_arr = np.ascontiguousarray(x_arr)
    if a_arr.shape != x_arr.shape or a_arr.ndim != 3:
        raise ValueError("scan expects matching (B,T,S) arrays")
    h_arr = np.empty_like(x_arr)
    if a_arr.dtype == np.float32:
        _forward[float](a_arr, x_arr, h_arr)
    elif a_arr.dtype == np.float64:
        _forward[double](a_arr, x_arr, h_arr)
    else:
        raise TypeError(f"unsupported dtype {a_arr.dtype}")
    return h_arr


def scan_backward(a_arr, h_arr, gh_arr):
    a_arr = np.ascontiguousarray(a_arr)
    h_arr = np.ascontiguousarray(h_arr)
    gh_arr = np.ascontiguousarray(gh_arr)
    ga_arr = np.empty_like(h_arr)
    gx_arr = np.empty_like(h_arr)
    if a_arr.dtype == np.float32:
        _backward[float](a_arr, h_arr, gh_arr, ga_arr, gx_arr)
    elif a_arr.dtype == np.float64:
        _backward[double](a_arr, h_arr, gh_arr, ga_arr, gx_arr)
    else:
        raise TypeError(f"unsupported dtype {a_arr.dtype}")
    return ga_arr, gx_arr


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _forward(floating[:, :, ::1] a, floating[:, :, ::1] x,
                   floating[:, :, ::1] h) noexcept nogil:
    cdef Py_ssize_t B = a.shape[0], T = a.shape[1], S = a.shape[2]
    cdef Py_ssize_t b, t, s
    cdef floating prev
    for b in range(B):
        for s in range(S):
            prev = 0.0
            for t in range(T):
                prev = a[b, t, s] * prev + x[b, t, s]
                h[b, t, s] = prev


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _backward(floating[:, :, ::1] a, floating[:, :, ::1] h,
                    floating[:, :, ::1] gh, floating[:, :, ::1] ga,
                    floating[:, :, ::1] gx) noexcept nogil:
    cdef Py_ssize_t B = a.shape[0], T = a.shape[1], S = a.shape[2]
    cdef Py_ssize_t b, t, s
    cdef floating g
    for b in range(B):
        for s in range(S):
            g = 0.0
            for t in range(T - 1, -1, -1):
                g = gh[b, t, s] + g
                gx[b, t, s] = g
                if t > 0:
                    ga[b, t, s] = g * h[b, t - 1, s]
                else:
                    ga[b, t, s] = 0.0
                g = a[b, t, s] * g
