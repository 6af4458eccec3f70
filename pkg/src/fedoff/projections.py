"""Euclidean projections onto the simple sets making up the offloading
polytope, plus Dykstra's alternating method for their intersection.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def project_simplex(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Project onto {w >= 0, sum(w) = radius} (sort-based algorithm)."""
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, n + 1) > (css - radius))[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_capped_simplex(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Project onto {w >= 0, sum(w) <= radius}."""
    w = np.maximum(v, 0.0)
    if w.sum() <= radius:
        return w
    return project_simplex(v, radius)


def project_halfspace(v: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """Project onto {w : a.w <= b}."""
    excess = float(a @ v) - b
    if excess <= 0.0:
        return v
    return v - (excess / float(a @ a)) * a


def dykstra(v: np.ndarray, projections: Sequence[Callable[[np.ndarray], np.ndarray]],
            max_cycles: int = 200, tol: float = 1e-12) -> np.ndarray:
    """Dykstra's alternating projections onto an intersection of convex sets.

    Converges to the Euclidean projection of ``v`` onto the intersection,
    assuming it is nonempty.
    """
    x = v.copy()
    increments = [np.zeros_like(v) for _ in projections]
    for _ in range(max_cycles):
        max_shift = 0.0
        for idx, proj in enumerate(projections):
            y = x + increments[idx]
            x_new = proj(y)
            increments[idx] = y - x_new
            max_shift = max(max_shift, float(np.max(np.abs(x_new - x))) if x.size else 0.0)
            x = x_new
        if max_shift <= tol:
            break
    return x
