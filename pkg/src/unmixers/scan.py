"""Affine prefix scans over the leading axis.

Both routines compute h[t] = a[t] * h[t-1] + b[t] with h[-1] = 0, elementwise
over all trailing axes. Each step is the affine map h -> a*h + b; two maps
applied in order (first, then second) compose to

    (a2 * a1, a2 * b1 + b2)

which is associative with identity (1, 0). The sequential version is the
reference; the Blelloch version runs a work-efficient up-sweep/down-sweep over
the maps and is vectorised across each tree level.
"""
from __future__ import annotations

import numpy as np

IDENTITY = (1.0, 0.0)


def compose(first, second):
    """Affine map equal to applying ``first`` and then ``second``."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def affine_scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"scan operands differ in shape: {a.shape} vs {b.shape}")
    h = np.empty_like(b)
    acc = np.zeros(b.shape[1:], dtype=b.dtype)
    for t in range(b.shape[0]):
        acc = a[t] * acc + b[t]
        h[t] = acc
    return h


def affine_scan_blelloch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"scan operands differ in shape: {a.shape} vs {b.shape}")
    length = a.shape[0]
    if length == 0:
        return np.empty_like(b)
    n = 1 << (length - 1).bit_length()
    tail = a.shape[1:]
    # pad to a power of two with identity maps
    A = np.ones((n,) + tail, dtype=a.dtype)
    B = np.zeros((n,) + tail, dtype=b.dtype)
    A[:length] = a
    B[:length] = b

    step = 1
    while step < n:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        a_right = A[right]
        B[right] = a_right * B[left] + B[right]
        A[right] = a_right * A[left]
        step *= 2

    # down-sweep turns subtree totals into exclusive prefixes
    A[n - 1] = 1.0
    B[n - 1] = 0.0
    step = n // 2
    while step >= 1:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        tot_a = A[left].copy()
        tot_b = B[left].copy()
        A[left] = A[right]
        B[left] = B[right]
        A[right] = tot_a * A[left]
        B[right] = tot_a * B[left] + tot_b
        step //= 2

    # exclusive prefix applied to h=0 leaves only its offset
    return a * B[:length] + b


def affine_scan(a: np.ndarray, b: np.ndarray, method: str = "sequential") -> np.ndarray:
    if method == "sequential":
        return affine_scan_sequential(a, b)
    if method == "parallel":
        return affine_scan_blelloch(a, b)
    raise ValueError(f"unknown scan method {method!r}")
