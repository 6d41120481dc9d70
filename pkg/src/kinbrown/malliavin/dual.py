"""The divergence (Skorokhod integral) of the control h.

Everything is computed at base angle 0 and rotated: with ``y = (1 + R(-u)) v``
and ``M`` the inverse Gram matrix at angle 0,

    -delta h = b^T M y + int_0^T [S1(t) w_t^T + w_t^T M S2(t)] dt  M y,

    b = (B_T, -i int Q dB),   S1(t) = int_0^t c_s^T M e_s ds,
    S2(t) = int_0^t c_s e_s^T ds,   c_s = int_0^s w,

with ``w_t = (1, -i Q_t)`` and ``e_s = (0, e^{iB_s})`` in real coordinates.
This is the boundary term plus the double integral against the kernel
``K(t, s) = e_s w_t^T + w_t e_s^T``.

On the grid the formula is evaluated as the exact divergence of the
piecewise-constant control in the Gaussian space of driver increments,
``sum_j h_j dB_j - dt sum_j dh_j / d(dB_j)``: stochastic integrals are
left-point sums, ``w`` takes causal-midpoint cell values and the double
integral reduces to running sums, so a path costs O(n).  ``dual_direct``
assembles the same divergence from the derivative of the Gram matrix with
respect to every increment, in O(n^2), as an oracle.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import quad
from ..kbm import KineticPath, KineticState, flow, rotation
from ..paths import KL, Basis, GaussianCoefficients, TimeGrid, path_from_coefficients
from .control import (MalliavinMatrix, check_invertible, frame_functions,
                      inverse, matrix_reduced)


class FDSensitivityWarning(RuntimeWarning):
    """Central differences at steps h and 2h disagree beyond tolerance."""


@dataclass(frozen=True)
class DualEvaluation:
    delta: np.ndarray  # (...,)
    N_tilde: np.ndarray  # (..., 3), renormalized row
    N_raw: np.ndarray  # (..., 3), acts on (1 + R(-u)) v
    v: np.ndarray
    horizon: float
    u: float

    def for_direction(self, v) -> np.ndarray:
        y = rotation(-self.u) @ np.asarray(v, dtype=float)
        return -self.N_raw @ y


@dataclass(frozen=True)
class DualPieces:
    """Direction-free per-path arrays at base angle 0."""
    Q: np.ndarray  # (..., n+1) cumulative int e^{iB}
    w: np.ndarray  # (..., 3, n) cell values of J_t^{-1} V
    c: np.ndarray  # (..., 3, n) int_0^{t_i} w
    e: np.ndarray  # (..., 2, n) e^{iB} at left nodes
    b: np.ndarray  # (..., 3) boundary row sum_i w_i dB_i

    def gram(self, dt: float) -> np.ndarray:
        C = quad.cell_gram(self.w, dt)
        C[..., 0, 0] = dt * self.w.shape[-1]
        return C


def dual_pieces(B: np.ndarray, dt: float) -> DualPieces:
    a, Q, w = frame_functions(B, dt)
    c = np.zeros_like(w)
    np.cumsum(dt * w[..., :-1], axis=-1, out=c[..., 1:])
    e = np.stack([a.real[..., :-1], a.imag[..., :-1]], axis=-2)
    b = np.einsum("...kn,...n->...k", w, np.diff(B, axis=-1))
    return DualPieces(Q, w, c, e, b)


def _pieces(B: np.ndarray, dt: float):
    p = dual_pieces(B, dt)
    return p.w, p.c, p.e, p.b


def dual_rows(B: Optional[np.ndarray], dt: float, Minv: np.ndarray,
              pieces: Optional[DualPieces] = None) -> np.ndarray:
    """Row N with -delta h = N . y, by prefix sums (O(n) per path).

    ``B`` has shape (..., n+1) and ``Minv`` (..., 3, 3) is the inverse
    Gram matrix at base angle 0.  Summing the outer integral by parts,

        int_0^T [S1(t) w_t + S2(t)^T M w_t] dt
            = int_0^T [c_s^T M e_s W_s + (c_s^T M W_s) e_s] ds,

    with ``W_s = int_s^T w`` a reversed running sum.
    """
    p = dual_pieces(B, dt) if pieces is None else pieces
    w, c, e, b = p.w, p.c, p.e, p.b
    W = np.cumsum(w[..., ::-1], axis=-1)[..., ::-1]  # sum_{j >= i} w_j
    phi = np.sum(c * (Minv[..., :, 1:] @ e), axis=-2)
    psi = np.sum(c * (Minv @ W), axis=-2)
    L = b + dt * dt * np.sum(phi[..., None, :] * W, axis=-1)
    L[..., 1:] += dt * dt * np.sum(psi[..., None, :] * e, axis=-1)
    return np.einsum("...i,...ij->...j", L, Minv)


def dual_direct(B: np.ndarray, dt: float, Minv: np.ndarray) -> np.ndarray:
    """Same divergence as ``dual_rows`` from dC/d(dB_i), in O(n^2).

    Single path only; meant for small grids.  Uses
    ``-dt sum_i dh_i/d(dB_i) = dt sum_i w_i^T M (dC/d(dB_i)) lam`` with
    ``dw_j/d(dB_i) = dt sum_{i<k<=j} e_k``.
    """
    w, _, e, b = _pieces(B, dt)
    n = w.shape[-1]
    e3 = np.vstack([np.zeros(n), e])
    row = b.copy()
    for i in range(n - 1):
        dw = np.zeros((3, n))
        dw[:, i + 1:] = dt * np.cumsum(e3[:, i + 1:], axis=-1)
        dC = dt * (dw @ w.T + w @ dw.T)
        row += dt * (w[:, i] @ Minv @ dC)
    return row @ Minv


def _scale(T: float) -> np.ndarray:
    return np.array([1.0, math.sqrt(T), math.sqrt(T)])


def dual_explicit(kp: KineticPath, M: Optional[MalliavinMatrix], v) -> DualEvaluation:
    """delta h for the control h(x, T, v), with the renormalized row N~(T).

    ``-delta h = N~(T) . (1 + R(-u)) v_T`` with ``v_T = (v_R, v_C / sqrt T)``.
    """
    if M is None:
        M = matrix_reduced(kp)
    Minv = inverse(M, frame=True)
    v = np.asarray(v, dtype=float)
    T = kp.grid.horizon
    N = dual_rows(kp.driver.values, kp.grid.dt, Minv)
    y = rotation(-kp.start.u) @ v
    return DualEvaluation(-(N @ y), N * _scale(T), N, v, T, kp.start.u)


def v_T(v, T: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / _scale(T)


# ---------------------------------------------------------------- basis oracle

def _columns(B: np.ndarray, dt: float, table: np.ndarray) -> np.ndarray:
    """I_k = a_T(e_k) = sum_j w_j (g_k(t_{j+1}) - g_k(t_j)) at angle 0: (..., 3, K+1)."""
    _, _, w = frame_functions(B, dt)
    return np.einsum("...in,kn->...ik", w, np.diff(table, axis=-1))


def basis_columns(kp: KineticPath, K: int, basis: Optional[Basis] = None) -> np.ndarray:
    """The matrix A_T with columns I_0(T) .. I_K(T), shape (..., 3, K+1).

    Columns live at base angle 0; ``A_T A_T^T`` approximates the Gram matrix
    rotated to angle 0.
    """
    drv = kp.driver
    if basis is None:
        basis = drv.basis or KL
    if drv.provenance == "basis" and drv.coefficients.truncation < K:
        raise ValueError(f"path has {drv.coefficients.truncation} modes, need {K}")
    return _columns(drv.values, kp.grid.dt, basis.table(K, kp.grid))


def control_coefficients(kp: KineticPath, K: int, v,
                         basis: Optional[Basis] = None) -> np.ndarray:
    """alpha_k = -I_k^T C^{-1} (1 + R(-u)) v for k <= K."""
    A = basis_columns(kp, K, basis)
    Minv = inverse(matrix_reduced(kp), frame=True)
    y = rotation(-kp.start.u) @ np.asarray(v, dtype=float)
    return -np.einsum("...ik,...ij,j->...k", A, Minv, y)


def basis_reassemble(alpha: np.ndarray, grid: TimeGrid,
                     basis: Basis = KL) -> np.ndarray:
    """Cell values of sum_k alpha_k e_{k,T} (differences of the primitives)."""
    table = basis.table(alpha.shape[-1] - 1, grid)
    return alpha @ (np.diff(table, axis=-1) / grid.dt)


def _alpha_batch(values: np.ndarray, full: np.ndarray, K: int, dt: float,
                 y: np.ndarray) -> np.ndarray:
    B = values @ full
    B[..., 0] = 0.0
    _, _, w = frame_functions(B, dt)
    C = quad.cell_gram(w, dt)
    C[..., 0, 0] = dt * (B.shape[-1] - 1)
    check_invertible(C)
    A = _columns(B, dt, full[:K + 1])
    return -np.einsum("...ik,...ij,j->...k", A, np.linalg.inv(C), y)


def dual_basis_truncated(xi: GaussianCoefficients, K: int, grid: TimeGrid,
                         x: KineticState, v, fd_step: float = 1e-4,
                         basis: Basis = KL, rtol: float = 1e-6) -> float:
    """sum_{k<=K} (alpha_k xi_k - d alpha_k / d xi_k), by central differences.

    The path is rebuilt from every perturbed coefficient vector.  Steps h
    and 2h are combined by Richardson extrapolation; a warning is issued if
    they disagree by more than ``rtol`` relative.
    """
    if K > xi.truncation:
        raise ValueError(f"K={K} exceeds the {xi.truncation} sampled modes")
    full = basis.table(xi.truncation, grid)
    y = rotation(-x.u) @ np.asarray(v, dtype=float)
    base = _alpha_batch(xi.values[None, :], full, K, grid.dt, y)[0]
    idx = np.arange(K + 1)
    derivs = []
    for h in (fd_step, 2 * fd_step):
        bump = np.zeros((K + 1, xi.values.size))
        bump[idx, idx] = h
        vals = np.concatenate([xi.values + bump, xi.values - bump])
        al = _alpha_batch(vals, full, K, grid.dt, y)
        derivs.append((al[idx, idx] - al[K + 1 + idx, idx]) / (2 * h))
    d1, d2 = (np.sum(d) for d in derivs)
    trace = d1 + (d1 - d2) / 3.0
    if abs(d1 - d2) > rtol * (1.0 + abs(d1)):
        warnings.warn(f"finite-difference trace sensitive to step: {d1:.6g} "
                      f"vs {d2:.6g}", FDSensitivityWarning, stacklevel=2)
    return float(base @ xi.values[:K + 1] - trace)


def explicit_for_coefficients(xi: GaussianCoefficients, grid: TimeGrid,
                              x: KineticState, v, basis: Basis = KL) -> float:
    """dual_explicit on the path built from ``xi``; pairs with the oracle."""
    kp = flow(x, path_from_coefficients(grid, xi, basis))
    return float(dual_explicit(kp, None, v).delta)
