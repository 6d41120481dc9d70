"""Kinetic Brownian motion on the plane, its tangent flow and generator.

The flow started at ``x = (u, z)`` and driven by ``B`` is

    U_t = u + B_t,     Z_t = z + e^{iu} Q_t,     Q_t = int_0^t e^{i B_s} ds,

with ``Q`` the cumulative trapezoid integral.  Directions in R x C are real
3-vectors ``(v_R, Re v_C, Im v_C)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import quad, rng
from .catalog import TestFunction
from .paths import BrownianPath, TimeGrid, from_increments
from .stats import estimate, Estimate

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class KineticState:
    u: float
    z: complex = 0j
    circle: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(complex(self.z).real)
                and math.isfinite(complex(self.z).imag)):
            raise ValueError("kinetic state must be finite")
        if self.circle:
            object.__setattr__(self, "u", self.u % TWO_PI)
        object.__setattr__(self, "z", complex(self.z))

    def vector(self) -> np.ndarray:
        return np.array([self.u, self.z.real, self.z.imag])

    def shifted(self, v, eps: float = 1.0) -> "KineticState":
        v = np.asarray(v, dtype=float)
        return KineticState(self.u + eps * v[0],
                            self.z + eps * complex(v[1], v[2]), self.circle)


def rotation(u) -> np.ndarray:
    """The block matrix 1 (+) R(u) acting on (v_R, v_C); broadcasts over u."""
    u = np.asarray(u, dtype=float)
    c, s = np.cos(u), np.sin(u)
    out = np.zeros(u.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = c
    out[..., 1, 2] = -s
    out[..., 2, 1] = s
    out[..., 2, 2] = c
    return out


def plane(w) -> np.ndarray:
    """Complex array -> trailing real pair (Re, Im)."""
    w = np.asarray(w)
    return np.stack([w.real, w.imag], axis=-1)


@dataclass(frozen=True)
class KineticPath:
    start: KineticState
    driver: BrownianPath
    Q: np.ndarray  # cumulative int_0^t e^{iB}, shape (..., n+1)

    @property
    def grid(self) -> TimeGrid:
        return self.driver.grid

    @property
    def lifted_U(self) -> np.ndarray:
        return self.start.u + self.driver.values

    @property
    def U(self) -> np.ndarray:
        U = self.lifted_U
        return U % TWO_PI if self.start.circle else U

    @property
    def Z(self) -> np.ndarray:
        return self.start.z + np.exp(1j * self.start.u) * self.Q

    def end(self) -> tuple:
        return self.U[..., -1], self.Z[..., -1]


def phase_integral(driver: BrownianPath) -> np.ndarray:
    return quad.cumtrapz(np.exp(1j * driver.values), driver.grid.dt)


def flow(x: KineticState, driver: BrownianPath, circle: bool | None = None) -> KineticPath:
    if circle is not None and circle != x.circle:
        x = KineticState(x.u, x.z, circle)
    return KineticPath(x, driver, phase_integral(driver))


def _index(kp: KineticPath, i: int) -> int:
    n = kp.grid.steps
    if not -n - 1 <= i <= n:
        raise IndexError(f"time index {i} outside grid of {n} steps")
    return i % (n + 1)


def _tangent_column(kp: KineticPath, i: int) -> np.ndarray:
    return plane(1j * np.exp(1j * kp.start.u) * kp.Q[..., _index(kp, i)])


def tangent(kp: KineticPath, i: int) -> np.ndarray:
    """J_t as a real 3x3 matrix (batched over leading path axes)."""
    col = _tangent_column(kp, i)
    J = np.broadcast_to(np.eye(3), col.shape[:-1] + (3, 3)).copy()
    J[..., 1:, 0] = col
    return J


def tangent_inverse(kp: KineticPath, i: int) -> np.ndarray:
    col = _tangent_column(kp, i)
    J = np.broadcast_to(np.eye(3), col.shape[:-1] + (3, 3)).copy()
    J[..., 1:, 0] = -col
    return J


def transported_direction(kp: KineticPath, i: int, j: int | None = None) -> np.ndarray:
    """J_T J_t^{-1} V = (1, i e^{iu} int_t^T e^{iB}) with t = t_i, T = t_j."""
    i = _index(kp, i)
    j = kp.grid.steps if j is None else _index(kp, j)
    if i > j:
        raise ValueError("need t_index <= T_index")
    w = 1j * np.exp(1j * kp.start.u) * (kp.Q[..., j] - kp.Q[..., i])
    out = np.zeros(np.shape(w) + (3,))
    out[..., 0] = 1.0
    out[..., 1:] = plane(w)
    return out


# ---------------------------------------------------------------- generator

def generator_residual(f: TestFunction, x: KineticState, t_small: float,
                       paths: int, seed: int, steps: int = 32) -> Estimate:
    """MC estimate of (P_t f(x) - f(x))/t - L f(x).

    Uses antithetic pairs (B, -B), which cancel the O(sqrt t) noise term.
    """
    if t_small <= 0:
        raise ValueError("t_small must be positive")
    grid = TimeGrid(t_small, steps)
    z = rng.normal_block(seed, range(paths), steps)
    drv = from_increments(grid, z)
    f0 = float(f(x.u, x.z))
    vals = []
    for sign in (1.0, -1.0):
        d = BrownianPath(grid, sign * drv.values)
        U, Z = flow(x, d).end()
        vals.append(f(U, Z))
    pair = 0.5 * (vals[0] + vals[1])
    target = float(f.generator(x.u, x.z))
    return estimate((pair - f0) / t_small - target, seed,
                    t=t_small, function=f.name)
