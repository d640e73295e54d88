"""Numpy implementations of the matching hot kernels.

These are the fallback used when the compiled extension is unavailable,
and the reference the extension is tested against.
"""

from __future__ import annotations

import numpy as np


def paired_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot products: out[i] = a[i] . b[i].

    a and b must both be (n, length) float64 arrays.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.einsum("ij,ij->i", a, b)


def cross_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs dot products: out[i, j] = a[i] . b[j].

    a is (na, length), b is (nb, length); result is (na, nb).
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"length mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T
