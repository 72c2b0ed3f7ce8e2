"""Shared test oracles: finite differences and gradient comparison."""

from __future__ import annotations

import numpy as np

FD_H = 1e-4


def fd_grad(f, x: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central finite-difference gradient of scalar-valued f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def grad_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case elementwise error, relative for entries above 1 in magnitude.

    err_i = |a_i - n_i| / max(1, |a_i|, |n_i|); suits gradients of O(1)
    networks where tiny entries carry finite-difference noise.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    assert a.shape == n.shape
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
