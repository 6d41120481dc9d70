"""Oscillating integrals of a rescaled Brownian driver and related probes.

All drivers here live on [0, 1] (``B~``); the oscillation parameter is
``lam = sqrt(T)``.  Lebesgue integrals use trapezoid cells, stochastic
integrals use left-point (Ito) sums on the same grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from . import quad, rng
from .kbm import plane
from .paths import BrownianPath, TimeGrid, batch_size, from_increments, unit_steps
from .stats import estimate


@dataclass(frozen=True)
class OscIntegrand:
    g: np.ndarray  # (..., n+1) on the unit grid
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("oscillation must be nonnegative")
        if not np.all(np.isfinite(self.g)):
            raise ValueError("weight must be finite")


@dataclass(frozen=True)
class TailProfile:
    thresholds: np.ndarray
    prob: np.ndarray
    stderr: np.ndarray
    slope: float  # fitted d log P / d x^2
    paths: int
    t: float
    theta: float


def _unit(driver: BrownianPath) -> None:
    if driver.T != 1.0:
        raise ValueError("oscillating integrals need a driver on [0, 1]")


def _sampled(g, driver: BrownianPath) -> np.ndarray:
    if callable(g):
        return np.asarray(g(driver.grid.nodes), dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != driver.grid.steps + 1:
        raise ValueError("weight and driver grids differ")
    return g


def osc_integral(g, lam: float, driver: BrownianPath, t: float = 1.0) -> np.ndarray:
    """int_0^t g(s) e^{i lam B_s} ds as (Re, Im); vector weights act componentwise."""
    _unit(driver)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    g = _sampled(g, driver)
    osc = OscIntegrand(g, lam)
    cum = quad.cumtrapz(osc.g * np.exp(1j * lam * driver.values), driver.grid.dt)
    pos = t * driver.grid.steps
    i = min(int(math.floor(pos)), driver.grid.steps - 1)
    w = pos - i
    return plane((1 - w) * cum[..., i] + w * cum[..., i + 1])


def iterated_osc_integral(l1, l2, lam: float, driver: BrownianPath) -> np.ndarray:
    """int_0^1 (int_0^s l2 e^{i lam B}) l1(s) (e^{i lam B_s})^* ds as a real 2x2."""
    _unit(driver)
    l1, l2 = _sampled(l1, driver), _sampled(l2, driver)
    dt = driver.grid.dt
    e = np.exp(1j * lam * driver.values)
    P = np.moveaxis(plane(quad.cumtrapz(l2 * e, dt)), -1, -2)  # (..., 2, n+1)
    E = np.moveaxis(plane(l1 * e), -1, -2)
    return dt * np.einsum("...in,...jn->...ij", quad.cellavg(P), quad.cellavg(E))


def second_moment(T: float) -> float:
    """E |sqrt(T) int_0^1 e^{i sqrt(T) B} ds|^2."""
    return 4.0 - (8.0 / T) * (1.0 - math.exp(-T / 2.0))


# ---------------------------------------------------------------- Ito identity

@dataclass(frozen=True)
class ItoResidual:
    residual: float
    remainder_sup: float
    remainder_bound: float

    @property
    def bound_holds(self) -> bool:
        return self.remainder_sup <= self.remainder_bound


def ito_identity_residual(g: Callable, dg: Callable, lam: float,
                          driver: BrownianPath) -> ItoResidual:
    """sup_t |lam int g e ds - 2i int g e dB - R(t)| for one unit path.

    ``R(t) = (2/lam) (g(0) - g(t) e_t + int_0^t g' e ds)`` is the closed-form
    remainder from Ito's formula applied to ``g(t) e^{i lam B_t}``.
    """
    _unit(driver)
    if lam <= 0:
        raise ValueError("need lam > 0")
    s = driver.grid.nodes
    dt = driver.grid.dt
    gs, dgs = np.asarray(g(s), dtype=float), np.asarray(dg(s), dtype=float)
    gs, dgs = np.broadcast_to(gs, s.shape), np.broadcast_to(dgs, s.shape)
    B = driver.values
    e = np.exp(1j * lam * B)
    lhs = lam * quad.cumtrapz(gs * e, dt)
    ito = np.zeros_like(e)
    np.cumsum((gs * e)[..., :-1] * np.diff(B, axis=-1), axis=-1, out=ito[..., 1:])
    R = (2.0 / lam) * (gs[0] - gs * e + quad.cumtrapz(dgs * e, dt))
    res = np.max(np.abs(lhs - 2j * ito - R))
    bound = (4 * np.max(np.abs(gs)) + 2 * np.max(np.abs(dgs))) / lam
    return ItoResidual(float(res), float(np.max(np.abs(R))), float(bound))


# ---------------------------------------------------------------- LLN probe

def circle_mean(f: Callable) -> float:
    val, _ = integrate.quad(lambda y: float(f(y)), 0.0, 2 * math.pi, limit=200)
    return val / (2 * math.pi)


def lln_probe(f: Callable, g, lam_grid: Sequence[float], paths: int, seed: int,
              steps: int | None = None, batch: int = 16, mapper=map) -> list:
    """Mean over paths of sup_t |int_0^t g f(lam B) - <f> int_0^t g| per lam.

    The same driver streams are reused for every lam (common random numbers).
    """
    mf = circle_mean(f)
    rows = []
    for lam in lam_grid:
        n = steps or unit_steps(lam * lam)
        grid = TimeGrid(1.0, n)
        g_s = np.broadcast_to(np.asarray(g(grid.nodes) if callable(g) else g,
                                         dtype=float), (n + 1,))
        base = quad.cumtrapz(g_s, grid.dt)

        size = batch_size(n, batch)

        def work(lo, lam=lam, grid=grid, g_s=g_s, base=base, size=size):
            drv = from_increments(grid, rng.normal_block(
                seed, range(lo, min(paths, lo + size)), grid.steps))
            cum = quad.cumtrapz(g_s * f(lam * drv.values), grid.dt)
            return np.max(np.abs(cum - mf * base), axis=-1)

        est = estimate(np.concatenate(list(mapper(work, range(0, paths, size)))))
        rows.append({"lam": lam, "steps": n, "mean": est.mean,
                     "stderr": est.stderr, "paths": est.n, "limit": mf})
    return rows


# ---------------------------------------------------------------- tails

def tail_sample(theta: float, t: float, paths: int, seed: int,
                steps_per_unit: int = 64, batch: int = 256, mapper=map) -> np.ndarray:
    """J(theta, t) = t^{-1/2} int_0^t sin(theta + B_s) ds for each path."""
    if t < 1:
        raise ValueError("need t >= 1")
    grid = TimeGrid(t, max(64, int(math.ceil(steps_per_unit * t))))
    batch = batch_size(grid.steps, batch)

    def work(lo):
        drv = from_increments(grid, rng.normal_block(
            seed, range(lo, min(paths, lo + batch)), grid.steps))
        return quad.trapz(np.sin(theta + drv.values), grid.dt) / math.sqrt(t)

    return np.concatenate(list(mapper(work, range(0, paths, batch))))


def subgaussian_tail_probe(theta: float, t: float, paths: int, thresholds,
                           seed: int = 0, min_count: int = 20, **kw) -> TailProfile:
    """Exceedance P(|J| > x) with binomial s.e. and the slope of log P vs x^2.

    The fit uses thresholds with at least ``min_count`` exceedances.
    """
    x = np.sort(np.asarray(thresholds, dtype=float))
    J = np.abs(tail_sample(theta, t, paths, seed, **kw))
    counts = np.array([np.sum(J > xi) for xi in x])
    p = counts / paths
    se = np.sqrt(p * (1 - p) / paths)
    keep = counts >= min_count
    if np.sum(keep) >= 2:
        slope = float(np.polyfit(x[keep] ** 2, np.log(p[keep]), 1)[0])
    else:
        slope = math.nan
    return TailProfile(x, p, se, slope, paths, t, theta)


# ---------------------------------------------------------------- negative moments

def gaussian_negative_moment(alpha: float, t: float = 1.0) -> float:
    """E|B_t|^{-alpha} in closed form."""
    return (2 * t) ** (-alpha / 2) * math.gamma((1 - alpha) / 2) / math.sqrt(math.pi)


def negative_moment(alpha: float, t: float, a: float, tol: float = 1e-9) -> tuple:
    """E|a + B_t|^{-alpha} by quadrature; returns (value, abserr).

    With y = x + a the singularity sits at y = 0; each half-line is
    integrated with the algebraic weight y^{-alpha}.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if t <= 0:
        raise ValueError("t must be positive")
    sd = math.sqrt(t)
    L = abs(a) + 40 * sd
    dens = lambda x: math.exp(-x * x / (2 * t)) / math.sqrt(2 * math.pi * t)
    total, err = 0.0, 0.0
    for sign in (1.0, -1.0):
        val, e = integrate.quad(lambda y: dens(sign * y - a), 0.0, L,
                                weight="alg", wvar=(-alpha, 0.0),
                                epsabs=tol, epsrel=tol, limit=400)
        total += val
        err += e
    if err > 100 * tol * max(1.0, total):
        raise RuntimeError(f"quadrature did not converge: achieved {err:.3g}")
    return total, err


def negative_moment_monotonicity(alpha: float, t: float, a_grid) -> list:
    """E|a + B_t|^{-alpha} on ``a_grid`` and whether it is nonincreasing in |a|."""
    rows = [{"a": float(a), "value": v, "abserr": e}
            for a in a_grid for v, e in [negative_moment(alpha, t, float(a))]]
    order = sorted(rows, key=lambda r: abs(r["a"]))
    ok = all(order[i + 1]["value"] <= order[i]["value"] + 1e-12
             for i in range(len(order) - 1))
    for r in rows:
        r["monotone"] = ok
    return rows
