"""Brownian driving paths on uniform grids.

Paths are built either from i.i.d. Gaussian increments or from a truncated
orthonormal-basis expansion ``B(t) = sum_k g_{k,T}(t) xi_k``.  Values carry
an optional leading batch axis: shape ``(n+1,)`` for one path, ``(m, n+1)``
for ``m`` replicates.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng
from .rng import SeedSpec

MIN_UNIT_STEPS = 4096
PHASE_FACTOR = 64


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValueError(f"need at least 2 steps, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def unit(self) -> "TimeGrid":
        return TimeGrid(1.0, self.steps)


BATCH_CELLS = 1 << 20


def batch_size(steps: int, cap: int) -> int:
    """Replicates per batch so that one batch holds about BATCH_CELLS nodes."""
    return max(1, min(cap, BATCH_CELLS // max(1, steps)))


def unit_steps(T: float, minimum: int = MIN_UNIT_STEPS,
               factor: int = PHASE_FACTOR) -> int:
    """Steps on [0, 1] resolving ``exp(i sqrt(T) B)``: RMS phase step <= 1/8."""
    return int(max(minimum, math.ceil(factor * T)))


# ---------------------------------------------------------------- bases

class Basis:
    """Primitives ``g_k`` of an orthonormal basis ``e_k`` of L^2[0,1], e_0 = 1.

    Subclasses implement ``unit_g`` and ``unit_e``; the dilated versions
    on [0, T] follow ``g_{k,T}(t) = sqrt(T) g_k(t/T)``.
    """

    name = "basis"

    def unit_g(self, k: np.ndarray, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def unit_e(self, k: np.ndarray, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def g(self, k, T: float, t) -> np.ndarray:
        k = np.asarray(k)
        t = np.asarray(t, dtype=float)
        return math.sqrt(T) * self.unit_g(k, t / T)

    def e(self, k, T: float, t) -> np.ndarray:
        k = np.asarray(k)
        t = np.asarray(t, dtype=float)
        return self.unit_e(k, t / T) / math.sqrt(T)

    def table(self, K: int, grid: TimeGrid) -> np.ndarray:
        """``g_{k,T}(t_i)`` as a (K+1, n+1) array."""
        k = np.arange(K + 1)[:, None]
        return self.g(k, grid.horizon, grid.nodes[None, :])


class KarhunenLoeve(Basis):
    name = "kl"

    def unit_g(self, k, s):
        k, s = np.broadcast_arrays(k, s)
        out = np.empty(k.shape)
        lin = k == 0
        out[lin] = s[lin]
        kk = k[~lin]
        out[~lin] = math.sqrt(2.0) * np.sin(kk * np.pi * s[~lin]) / (np.pi * kk)
        return out

    def unit_e(self, k, s):
        k, s = np.broadcast_arrays(k, s)
        return np.where(k == 0, 1.0, math.sqrt(2.0) * np.cos(k * np.pi * s))


class Schauder(Basis):
    """Haar functions and their tent primitives (Levy-Ciesielski)."""

    name = "schauder"

    @staticmethod
    def _split(k):
        kk = np.maximum(k, 1)
        level = np.floor(np.log2(kk)).astype(int)
        return level, kk - (1 << level)

    def unit_g(self, k, s):
        k, s = np.broadcast_arrays(k, s)
        level, m = self._split(k)
        width = 2.0 ** (-level)
        left = m * width
        mid = left + width / 2
        scale = 2.0 ** (level / 2)
        up = np.clip(s - left, 0.0, None) - 2 * np.clip(s - mid, 0.0, None) \
            + np.clip(s - left - width, 0.0, None)
        return np.where(k == 0, s, scale * up)

    def unit_e(self, k, s):
        k, s = np.broadcast_arrays(k, s)
        level, m = self._split(k)
        width = 2.0 ** (-level)
        left = m * width
        scale = 2.0 ** (level / 2)
        pos = (s >= left) & (s < left + width / 2)
        neg = (s >= left + width / 2) & (s < left + width)
        haar = scale * (pos.astype(float) - neg.astype(float))
        return np.where(k == 0, 1.0, haar)


KL = KarhunenLoeve()


def kl_basis(k: int, T: float, t: float) -> float:
    """``g_{k,T}(t)`` of the Karhunen-Loeve basis."""
    if k < 0:
        raise ValueError(f"mode index must be >= 0, got {k}")
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    return float(KL.g(k, T, t))


# ---------------------------------------------------------------- paths

@dataclass(frozen=True)
class GaussianCoefficients:
    values: np.ndarray

    @property
    def truncation(self) -> int:
        return self.values.shape[-1] - 1

    @classmethod
    def sample(cls, K: int, seed: SeedSpec) -> "GaussianCoefficients":
        return cls(rng.normals(seed, K + 1, rng.COEFFICIENTS))


@dataclass(frozen=True)
class BrownianPath:
    grid: TimeGrid
    values: np.ndarray
    provenance: str = "increments"
    coefficients: Optional[GaussianCoefficients] = None
    basis: Optional[Basis] = field(default=None, repr=False)

    @property
    def T(self) -> float:
        return self.grid.horizon

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[:-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        vals = np.atleast_2d(self.values)
        w.writerow(["t"] + [f"B{i}" if vals.shape[0] > 1 else "B"
                            for i in range(vals.shape[0])])
        for i, t in enumerate(self.grid.nodes):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in vals[:, i]])
        return buf.getvalue()


def from_increments(grid: TimeGrid, z: np.ndarray) -> BrownianPath:
    """Path from standard normals ``z`` of shape (..., n)."""
    vals = np.zeros(z.shape[:-1] + (grid.steps + 1,))
    np.cumsum(math.sqrt(grid.dt) * z, axis=-1, out=vals[..., 1:])
    return BrownianPath(grid, vals)


def sample_increments(grid: TimeGrid, seed: SeedSpec) -> BrownianPath:
    return from_increments(grid, rng.normals(seed, grid.steps))


def sample_batch(grid: TimeGrid, seed: int, streams) -> BrownianPath:
    """One path per replicate stream, stacked on a leading axis."""
    return from_increments(grid, rng.normal_block(seed, streams, grid.steps))


def path_from_coefficients(grid: TimeGrid, coeffs: GaussianCoefficients,
                           basis: Basis = KL) -> BrownianPath:
    table = basis.table(coeffs.truncation, grid)
    vals = coeffs.values @ table
    vals[..., 0] = 0.0
    return BrownianPath(grid, vals, "basis", coeffs, basis)


def sample_kl_path(grid: TimeGrid, K: int, seed: SeedSpec,
                   basis: Basis = KL) -> BrownianPath:
    if K < 1:
        raise ValueError(f"truncation K must be >= 1, got {K}")
    return path_from_coefficients(grid, GaussianCoefficients.sample(K, seed), basis)


def basis_completeness_residual(grid: TimeGrid, K: int, basis: Basis = KL) -> float:
    """max_i |t_i - sum_{k<=K} g_{k,T}(t_i)^2|."""
    if K < 1:
        raise ValueError(f"truncation K must be >= 1, got {K}")
    table = basis.table(K, grid)
    return float(np.max(np.abs(grid.nodes - np.sum(table ** 2, axis=0))))


def rescale_to_unit(path: BrownianPath) -> BrownianPath:
    """B~(s) = B(Ts)/sqrt(T) on [0, 1]."""
    T = path.T
    return replace(path, grid=path.grid.unit(), values=path.values / math.sqrt(T))


def rescale_from_unit(path: BrownianPath, T: float) -> BrownianPath:
    if path.T != 1.0:
        raise ValueError("path is not on the unit interval")
    return replace(path, grid=TimeGrid(T, path.grid.steps),
                   values=path.values * math.sqrt(T))


def subsample(path: BrownianPath, factor: int) -> BrownianPath:
    """Keep every ``factor``-th node (same Brownian path, coarser grid)."""
    if path.grid.steps % factor:
        raise ValueError("factor must divide the number of steps")
    grid = TimeGrid(path.T, path.grid.steps // factor)
    return replace(path, grid=grid, values=path.values[..., ::factor])
