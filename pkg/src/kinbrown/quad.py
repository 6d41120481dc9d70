"""Grid quadrature shared by every module.

Integrals of a single sampled function use the trapezoid rule.  Integrals of
a product of two sampled functions use the product of trapezoid cell
averages, ``sum_j dt * mean_j(f) * mean_j(g)``.

Controls (elements of L^2 acting on the driver increments) are piecewise
constant on cells.  The cell value of a primitive ``Y = int y`` is its
causal midpoint ``Y_j + dt y_j / 2``: it only uses information up to t_j
and is exactly the sensitivity of the trapezoid rule to the increment on
cell j.  All helpers act on the last axis.
"""
from __future__ import annotations

import numpy as np


def cellavg(y: np.ndarray) -> np.ndarray:
    return 0.5 * (y[..., 1:] + y[..., :-1])


def cumtrapz(y: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(y)
    np.cumsum(dt * cellavg(y), axis=-1, out=out[..., 1:])
    return out


def trapz(y: np.ndarray, dt: float) -> np.ndarray:
    return dt * (y[..., 1:-1].sum(axis=-1) + 0.5 * (y[..., 0] + y[..., -1]))


def inner(f: np.ndarray, g: np.ndarray, dt: float) -> np.ndarray:
    """Product rule: ``dt * sum(avg f * avg g)``; no conjugation."""
    return dt * np.sum(cellavg(f) * cellavg(g), axis=-1)


def cuminner(f: np.ndarray, g: np.ndarray, dt: float) -> np.ndarray:
    prod = dt * cellavg(f) * cellavg(g)
    out = np.zeros(np.broadcast_shapes(f.shape, g.shape), dtype=prod.dtype)
    np.cumsum(prod, axis=-1, out=out[..., 1:])
    return out


def gram(funcs: np.ndarray, dt: float) -> np.ndarray:
    """Gram matrix of real functions stacked on axis -2: (..., k, n+1) -> (..., k, k)."""
    a = cellavg(funcs)
    return dt * np.einsum("...in,...jn->...ij", a, a)


def causal_mid(Y: np.ndarray, y: np.ndarray, dt: float) -> np.ndarray:
    """Cell values ``Y_j + dt y_j / 2`` of a primitive Y with derivative y."""
    return Y[..., :-1] + 0.5 * dt * y[..., :-1]


def cell_gram(cells: np.ndarray, dt: float) -> np.ndarray:
    """Gram matrix of piecewise-constant functions: (..., k, n) -> (..., k, k)."""
    return dt * np.einsum("...in,...jn->...ij", cells, cells)


def primitive(cells: np.ndarray, dt: float) -> np.ndarray:
    """Node values of the exact primitive of a piecewise-constant function."""
    out = np.zeros(cells.shape[:-1] + (cells.shape[-1] + 1,), dtype=cells.dtype)
    np.cumsum(dt * cells, axis=-1, out=out[..., 1:])
    return out
