"""The infinitesimal control problem and the reduced Malliavin matrix.

For the flow started at angle ``u`` the control functions are

    h_0 = 1,   h_1(t) = int_0^t sin(u + B),   h_2(t) = -int_0^t cos(u + B),

i.e. ``h_1 + i h_2 = -i e^{iu} Q_t``.  The Gram matrix of (h_0, h_1, h_2) is
the reduced Malliavin matrix, and ``h = sum lam_k h_k`` with
``lam = -C^{-1} v`` solves ``J_T v + D X_T(h) = 0``.

Node values of h_1, h_2 are cumulative trapezoid integrals.  Inner products
use the piecewise-constant cell values (causal midpoints, see ``quad``),
which makes the Malliavin derivative of the simulated flow, the control
equation and the discrete divergence mutually exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import quad
from ..kbm import KineticPath, plane, rotation
from ..paths import TimeGrid

EIG_FLOOR = 1e-12


class SingularMatrix(ArithmeticError):
    """Raised when a Malliavin matrix is numerically singular."""

    def __init__(self, msg: str, count: int = 1):
        super().__init__(msg)
        self.count = count


@dataclass(frozen=True)
class ControlFunctions:
    grid: TimeGrid
    u: float
    h: np.ndarray  # (..., 3, n+1) node values
    cells: np.ndarray  # (..., 3, n) cell values


@dataclass(frozen=True)
class MalliavinMatrix:
    matrix: np.ndarray  # (..., 3, 3), at base angle u
    horizon: float
    u: float = 0.0

    def frame(self) -> np.ndarray:
        """The matrix rotated back to base angle 0."""
        if self.u == 0.0:
            return self.matrix
        return rotation(-self.u) @ self.matrix @ rotation(self.u)

    def scaling(self) -> np.ndarray:
        T = self.horizon
        return np.array([math.sqrt(T), T, T])


@dataclass(frozen=True)
class ControlSolution:
    lam: np.ndarray  # (..., 3)
    h: np.ndarray  # (..., n+1) node values
    cells: np.ndarray  # (..., n) cell values
    v: np.ndarray
    alpha: Optional[np.ndarray] = None


def singular_mask(C: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    ev = np.linalg.eigvalsh(C)
    tr = np.trace(C, axis1=-2, axis2=-1)
    return ev[..., 0] < floor * tr


def check_invertible(C: np.ndarray, floor: float = EIG_FLOOR) -> None:
    bad = singular_mask(C, floor)
    if np.any(bad):
        raise SingularMatrix(
            f"{int(np.sum(bad))} Malliavin matrix sample(s) below the "
            f"eigenvalue floor {floor:g} * trace", int(np.sum(bad)))


def _stack_w(Qc: np.ndarray) -> np.ndarray:
    """(1, -i Qc) in real coordinates, shape (..., 3, n)."""
    w = np.empty(Qc.shape[:-1] + (3, Qc.shape[-1]))
    w[..., 0, :] = 1.0
    w[..., 1, :] = Qc.imag
    w[..., 2, :] = -Qc.real
    return w


def frame_functions(B: np.ndarray, dt: float) -> tuple:
    """(e^{iB}, Q, w) with w the cell values of J_t^{-1} V at base angle 0.

    ``a`` and ``Q`` have shape (..., n+1); ``w`` has shape (..., 3, n).
    """
    a = np.exp(1j * B)
    Q = quad.cumtrapz(a, dt)
    return a, Q, _stack_w(quad.causal_mid(Q, a, dt))


def control_functions(kp: KineticPath) -> ControlFunctions:
    dt = kp.grid.dt
    U = kp.lifted_U
    h = np.empty(U.shape[:-1] + (3, U.shape[-1]))
    h[..., 0, :] = 1.0
    h[..., 1, :] = quad.cumtrapz(np.sin(U), dt)
    h[..., 2, :] = -quad.cumtrapz(np.cos(U), dt)
    cells = np.empty(U.shape[:-1] + (3, U.shape[-1] - 1))
    cells[..., 0, :] = 1.0
    cells[..., 1, :] = quad.causal_mid(h[..., 1, :], np.sin(U), dt)
    cells[..., 2, :] = quad.causal_mid(h[..., 2, :], -np.cos(U), dt)
    return ControlFunctions(kp.grid, kp.start.u, h, cells)


def matrix_gram(cf: ControlFunctions) -> MalliavinMatrix:
    C = quad.cell_gram(cf.cells, cf.grid.dt)
    C[..., 0, 0] = cf.grid.horizon  # <1, 1> is exact
    return MalliavinMatrix(C, cf.grid.horizon, cf.u)


def matrix_reduced(kp: KineticPath) -> MalliavinMatrix:
    """int_0^T (J_t^{-1} V)(J_t^{-1} V)^* dt from the tangent flow."""
    a = np.exp(1j * kp.driver.values)
    rot = np.exp(1j * kp.start.u)
    w = _stack_w(rot * quad.causal_mid(kp.Q, a, kp.grid.dt))
    C = quad.cell_gram(w, kp.grid.dt)
    C[..., 0, 0] = kp.grid.horizon
    return MalliavinMatrix(C, kp.grid.horizon, kp.start.u)


def inverse(M: MalliavinMatrix, frame: bool = False) -> np.ndarray:
    """C^{-1}, computed through the renormalized matrix for conditioning."""
    C = M.frame() if frame else M.matrix
    check_invertible(C)
    d = M.scaling()
    Ct = C / np.multiply.outer(d, d)
    return np.linalg.inv(Ct) / np.multiply.outer(d, d)


def solve_control(M: MalliavinMatrix, cf: ControlFunctions, v) -> ControlSolution:
    """lam = -C^{-1} v; h = lam . (h_0, h_1, h_2)."""
    v = np.asarray(v, dtype=float)
    lam = -np.einsum("...ij,...j->...i", inverse(M), v)
    h = np.einsum("...k,...kn->...n", lam, cf.h)
    cells = np.einsum("...k,...kn->...n", lam, cf.cells)
    return ControlSolution(lam, h, cells, v)


def control_residual(M: MalliavinMatrix, cf: ControlFunctions,
                     sol: ControlSolution) -> np.ndarray:
    """Discrete a(h) + v, with a(h)_k = <h_k, h> over cell values."""
    ah = cf.grid.dt * np.einsum("...kn,...n->...k", cf.cells, sol.cells)
    return ah + sol.v


def malliavin_derivative(kp: KineticPath, h: np.ndarray,
                         rearranged: bool = False) -> np.ndarray:
    """D X_T(h) = (int h, i e^{iu} int_0^T e^{iB_t} int_0^t h dt).

    ``h`` holds cell values (length n).  The default evaluates the double
    integral as a trapezoid of ``e^{iB} H`` with H the exact primitive of h;
    ``rearranged=True`` uses ``i e^{iu} int_0^T (int_t^T e^{iB}) h(t) dt``
    with the tail integral taken from each cell's causal midpoint.
    """
    dt = kp.grid.dt
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != kp.grid.steps:
        raise ValueError("h must hold one value per grid cell")
    a = np.exp(1j * kp.driver.values)
    if rearranged:
        tail = kp.Q[..., -1:] - quad.causal_mid(kp.Q, a, dt)
        s = dt * np.sum(tail * h, axis=-1)
    else:
        s = quad.trapz(a * quad.primitive(h, dt), dt)
    out = np.empty(np.shape(s) + (3,))
    out[..., 0] = dt * np.sum(h, axis=-1)
    out[..., 1:] = plane(1j * np.exp(1j * kp.start.u) * s)
    return out


def renormalize(M: MalliavinMatrix) -> np.ndarray:
    """C~ = D^{-1} C D^{-1}, D = diag(sqrt T, T, T)."""
    d = M.scaling()
    Ct = M.matrix / np.multiply.outer(d, d)
    Ct[..., 0, 0] = 1.0
    return Ct


def unit_gram(unit_B: np.ndarray, T: float) -> np.ndarray:
    """Gram matrix on [0, 1] of (1, h~_1, h~_2) built from B~ and sqrt(T)."""
    steps = unit_B.shape[-1] - 1
    ds = 1.0 / steps
    lam = math.sqrt(T)
    a = np.exp(1j * lam * unit_B)
    w = _stack_w(lam * quad.causal_mid(quad.cumtrapz(a, ds), a, ds))
    G = quad.cell_gram(w, ds)
    G[..., 0, 0] = 1.0
    return G
