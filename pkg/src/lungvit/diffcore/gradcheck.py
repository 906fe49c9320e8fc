from __future__ import annotations

from typing import Callable

import numpy as np

from .array import DiffArray, backward, no_grad


def numeric_gradient(f: Callable[[DiffArray], DiffArray], x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central differences, evaluated in 64-bit regardless of ``x``'s dtype."""
    base = np.array(x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(DiffArray(base, dtype=np.float64)).data.sum())
            flat[i] = orig - step
            lo = float(f(DiffArray(base, dtype=np.float64)).data.sum())
            flat[i] = orig
            grad.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    return grad


def analytic_gradient(f: Callable[[DiffArray], DiffArray], x: np.ndarray, dtype=None) -> np.ndarray:
    xa = DiffArray(x, requires_grad=True, dtype=dtype or x.dtype)
    out = f(xa)
    backward(out)
    return np.zeros(x.shape) if xa.grad is None else xa.grad.astype(np.float64)


def finite_difference_check(
    f: Callable[[DiffArray], DiffArray], x: np.ndarray, step: float = 1e-3, dtype=None
) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    The reverse-mode gradient is taken at ``dtype`` (default: ``x.dtype``);
    the finite-difference reference always runs in 64-bit.
    """
    x = np.asarray(x)
    g_ad = analytic_gradient(f, x, dtype)
    g_fd = numeric_gradient(f, x, step)
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if x.size else 0.0
