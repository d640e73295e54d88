# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled matching kernels: paired and all-pairs dot products.

Same contracts as ridecloak.kernels.reference; that module is the oracle
these are tested against.
"""

import numpy as np


def paired_dots(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = np.empty(a.shape[0], dtype=np.float64)
    _paired(a, b, out)
    return out


def cross_dots(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"length mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    _cross(a, b, out)
    return out


cdef void _paired(double[:, ::1] a, double[:, ::1] b, double[::1] out) nogil:
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t length = a.shape[1]
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(length):
            acc += a[i, j] * b[i, j]
        out[i] = acc


cdef void _cross(double[:, ::1] a, double[:, ::1] b, double[:, ::1] out) nogil:
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t na = a.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    cdef Py_ssize_t length = a.shape[1]
    cdef double acc
    for i in range(na):
        for j in range(nb):
            acc = 0.0
            for k in range(length):
                acc += a[i, k] * b[j, k]
            out[i, j] = acc
