"""Pure-numpy reference implementation of the selective-scan recurrence.

Vectorized over batch and state dims, sequential over time (the recurrence
cannot be vectorized along T without an associative-scan reformulation).
The Cython twin in _scan.pyx fuses the time loop; both must agree to float
round-off, which test_kernels checks.
"""

from __future__ import annotations

import numpy as np


def scan_forward(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """h[t] = a[t] * h[t-1] + x[t] with h[-1] = 0, over (B, T, S) arrays."""
    if a.shape != x.shape or a.ndim != 3:
        raise ValueError(f"scan expects matching (B,T,S) arrays, got {a.shape} vs {x.shape}")
    h = np.empty_like(x)
    prev = np.zeros_like(x[:, 0])
    for t in range(x.shape[1]):
        prev = a[:, t] * prev + x[:, t]
        h[:, t] = prev
    return h


def scan_backward(a: np.ndarray, h: np.ndarray, grad_h: np.ndarray):
    """Reverse-mode pass: returns (grad_a, grad_x) for scan_forward."""
    B, T, S = h.shape
    grad_a = np.empty_like(h)
    grad_x = np.empty_like(h)
    g = np.zeros((B, S), dtype=h.dtype)
    for t in range(T - 1, -1, -1):
        g = grad_h[:, t] + g
        grad_x[:, t] = g
        if t > 0:
            grad_a[:, t] = g * h[:, t - 1]
        else:
            grad_a[:, t] = 0.0
        g = a[:, t] * g
    return grad_a, grad_x
