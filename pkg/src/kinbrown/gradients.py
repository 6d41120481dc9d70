"""Semigroup gradients of kinetic Brownian motion, estimated three ways.

* ``grad_fd``: central differences with common random numbers;
* ``grad_ibp``: ``(d_x P_T f, v) = -E[f(X_T) delta h]`` with the explicit dual;
* ``grad_mixed_horizontal``: a Bismut-type weight ``B_lam / lam`` on [0, lam]
  followed by the vertical dual restarted at ``X_lam``.

``coupling_experiment`` runs the mirror coupling of the angle drivers and
``rate_fit`` fits power laws in T.  Replicate ``i`` always uses stream ``i``
of the master seed, so batches can be evaluated in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps
from scipy.special import ndtr

from . import quad, rng
from .catalog import TestFunction, get
from .kbm import KineticState, rotation
from .malliavin.control import SingularMatrix, singular_mask
from .malliavin.dual import dual_pieces, dual_rows
from .paths import TimeGrid, batch_size
from .stats import Estimate, Partial, mc_reduce

STEPS_PER_UNIT = 64
MIN_STEPS = 64
BATCH = 2000
SINGULAR_LIMIT = 1e-3


@dataclass(frozen=True)
class GradientTask:
    function: str
    x: KineticState
    v: tuple
    T: float
    replicates: int
    seed: int
    kind: str = "ibp"  # fd | ibp | mixed | coupling
    eps: Optional[float] = None
    lam: Optional[float] = None

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if self.kind not in ("fd", "ibp", "mixed", "coupling"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "fd" and self.eps is not None and self.eps <= 0:
            raise ValueError("fd step must be positive")

    def run(self, steps: Optional[int] = None, mapper=map) -> Estimate:
        f = get(self.function)
        if self.kind == "fd":
            return grad_fd(f, self.x, self.v, self.T, self.eps, self.replicates,
                           self.seed, steps, mapper)
        if self.kind == "ibp":
            return grad_ibp(f, self.x, self.v, self.T, self.replicates, self.seed,
                            steps, mapper)
        if self.kind == "mixed":
            return grad_mixed_horizontal(f, self.x, self.T, self.lam,
                                         self.replicates, self.seed, steps, mapper)
        rec = coupling_experiment(f, self.x.u if self.x.u > 0 else 1e-2,
                                  self.x.z, [self.T], self.replicates, self.seed,
                                  mapper=mapper)
        return rec[0].difference


def default_grid(T: float, steps: Optional[int] = None) -> TimeGrid:
    if steps is None:
        steps = max(MIN_STEPS, int(math.ceil(STEPS_PER_UNIT * T)))
    return TimeGrid(T, steps)


def drivers(grid: TimeGrid, seed: int, lo: int, hi: int) -> np.ndarray:
    """Driver values for replicates lo..hi-1, shape (hi-lo, n+1)."""
    z = rng.normal_block(seed, range(lo, hi), grid.steps)
    B = np.zeros((hi - lo, grid.steps + 1))
    np.cumsum(math.sqrt(grid.dt) * z, axis=-1, out=B[:, 1:])
    return B


def batches(replicates: int, size: int = BATCH, steps: Optional[int] = None):
    """Replicate index ranges; with ``steps`` the size is capped by memory."""
    if steps is not None:
        size = batch_size(steps, size)
    for lo in range(0, replicates, size):
        yield lo, min(replicates, lo + size)


def endpoint(x: KineticState, B: np.ndarray, dt: float) -> tuple:
    """(U_T, Z_T) of the flow from x for each driver row."""
    Q = quad.trapz(np.exp(1j * B), dt)
    return x.u + B[..., -1], x.z + np.exp(1j * x.u) * Q


# ---------------------------------------------------------------- plain MC

def semigroup_mc(f: TestFunction, x: KineticState, T: float, replicates: int,
                 seed: int, steps: Optional[int] = None, mapper=map) -> Estimate:
    grid = default_grid(T, steps)

    def work(r):
        U, Z = endpoint(x, drivers(grid, seed, *r), grid.dt)
        return Partial.of(f(U, Z))

    parts = list(mapper(work, batches(replicates, steps=grid.steps)))
    return mc_reduce(parts, seed, T=T, estimator="mc", function=f.name)


# ---------------------------------------------------------------- FD

def fd_step(x: KineticState) -> float:
    return 1e-3 * (1.0 + float(np.linalg.norm(x.vector())))


def fd_samples(f: TestFunction, x: KineticState, v, B: np.ndarray, dt: float,
               eps: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    Q = quad.trapz(np.exp(1j * B), dt)
    out = 0.0
    for sign in (1.0, -1.0):
        y = x.shifted(v, sign * eps)
        out = out + sign * f(y.u + B[..., -1], y.z + np.exp(1j * y.u) * Q)
    return out / (2 * eps)


def grad_fd(f: TestFunction, x: KineticState, v, T: float,
            eps: Optional[float] = None, replicates: int = 10_000, seed: int = 0,
            steps: Optional[int] = None, mapper=map) -> Estimate:
    """Central difference with common random numbers.

    The same replicates are also differenced at eps/2; the gap between the
    two means is stored as ``meta['halving_gap']`` (an O(eps^2) bias probe).
    """
    eps = fd_step(x) if eps is None else eps
    if eps <= 0:
        raise ValueError("fd step must be positive")
    grid = default_grid(T, steps)

    def work(r):
        B = drivers(grid, seed, *r)
        a = fd_samples(f, x, v, B, grid.dt, eps)
        b = fd_samples(f, x, v, B, grid.dt, eps / 2)
        return Partial.of(a), Partial.of(a - b)

    full, half = zip(*mapper(work, batches(replicates, steps=grid.steps)))
    gap = mc_reduce(half)
    return mc_reduce(full, seed, T=T, estimator="fd", function=f.name, eps=eps,
                     halving_gap=gap.mean, halving_stderr=gap.stderr)


# ---------------------------------------------------------------- IBP

@dataclass
class DualBatch:
    """Direction-free per-path quantities: endpoint and dual row N."""
    U: np.ndarray
    Z: np.ndarray
    N: np.ndarray  # (m, 3); -delta h = N . (1 + R(-u)) v
    ok: np.ndarray  # nonsingular mask
    singular: int = 0
    C: Optional[np.ndarray] = None  # Gram matrices at angle 0


def dual_batch(x: KineticState, B: np.ndarray, dt: float) -> DualBatch:
    p = dual_pieces(B, dt)
    C = p.gram(dt)
    ok = ~singular_mask(C)
    T = dt * (B.shape[-1] - 1)
    d = np.array([math.sqrt(T), T, T])
    Minv = np.linalg.inv(C[ok] / np.multiply.outer(d, d)) / np.multiply.outer(d, d)
    N = np.full(B.shape[:-1] + (3,), np.nan)
    if np.all(ok):
        N[:] = dual_rows(None, dt, Minv, p)
    else:
        N[ok] = dual_rows(B[ok], dt, Minv)
    U = x.u + B[..., -1]
    Z = x.z + np.exp(1j * x.u) * p.Q[..., -1]
    return DualBatch(U, Z, N, ok, int(np.sum(~ok)), C)


def check_singular(count: int, total: int) -> None:
    if count > SINGULAR_LIMIT * total:
        raise SingularMatrix(f"{count} of {total} paths have a singular "
                             f"Malliavin matrix (limit {SINGULAR_LIMIT:.1%})", count)


def ibp_weights(db: DualBatch, x: KineticState, v) -> np.ndarray:
    """-delta h per nonsingular path."""
    y = rotation(-x.u) @ np.asarray(v, dtype=float)
    return db.N[db.ok] @ y


def grad_ibp(f: TestFunction, x: KineticState, v, T: float, replicates: int,
             seed: int, steps: Optional[int] = None, mapper=map) -> Estimate:
    """Mean of -f(X_T) delta h; singular paths are counted and dropped."""
    grid = default_grid(T, steps)

    def work(r):
        db = dual_batch(x, drivers(grid, seed, *r), grid.dt)
        vals = f(db.U[db.ok], db.Z[db.ok]) * ibp_weights(db, x, v)
        return Partial.of(vals), db.singular

    parts, sing = zip(*mapper(work, batches(replicates, steps=grid.steps)))
    bad = sum(sing)
    check_singular(bad, replicates)
    return mc_reduce(parts, seed, T=T, estimator="ibp", function=f.name, singular=bad)


def grad_ibp_many(fs: Sequence[TestFunction], x: KineticState, vs, T: float,
                  replicates: int, seed: int, steps: Optional[int] = None,
                  mapper=map) -> dict:
    """``grad_ibp`` for every (function, direction) pair from one set of dual rows.

    Keys are ``(f.name, j)`` with ``j`` indexing ``vs``; each estimate equals
    the one ``grad_ibp`` returns for the same arguments.
    """
    grid = default_grid(T, steps)
    keys = [(f.name, j) for f in fs for j in range(len(vs))]

    def work(r):
        db = dual_batch(x, drivers(grid, seed, *r), grid.dt)
        U, Z = db.U[db.ok], db.Z[db.ok]
        W = [ibp_weights(db, x, v) for v in vs]
        vals = {(f.name, j): Partial.of(f(U, Z) * W[j])
                for f in fs for j in range(len(vs))}
        return vals, db.singular

    parts, sing = zip(*mapper(work, batches(replicates, steps=grid.steps)))
    bad = sum(sing)
    check_singular(bad, replicates)
    return {k: mc_reduce([p[k] for p in parts], seed, T=T, estimator="ibp",
                         function=k[0], singular=bad) for k in keys}


# ---------------------------------------------------------------- mixed

def mixed_samples(f: TestFunction, x: KineticState, B: np.ndarray, dt: float,
                  k: int) -> tuple:
    """Per-path f(X_T) (B_lam / lam - delta'), lam = k dt; returns (samples, ok)."""
    lam = k * dt
    a = np.exp(1j * B)
    s = np.arange(k + 1) * dt
    w = 1j * np.exp(1j * x.u) * quad.trapz((1 - s / lam) * a[..., :k + 1], dt)
    Ul = x.u + B[..., k]
    tail = B[..., k:] - B[..., k:k + 1]
    db = dual_batch(KineticState(0.0), tail, dt)
    v = np.stack([np.zeros_like(w.real), w.real, w.imag], axis=-1)
    y = np.einsum("...ij,...j->...i", rotation(-Ul), v)
    delta = -np.sum(db.N * y, axis=-1)
    U, Z = endpoint(x, B, dt)
    vals = f(U, Z) * (B[..., k] / lam - delta)
    return vals[db.ok], db.ok


def grad_mixed_horizontal(f: TestFunction, x: KineticState, T: float,
                          lam: Optional[float] = None, replicates: int = 10_000,
                          seed: int = 0, steps: Optional[int] = None,
                          mapper=map) -> Estimate:
    """Horizontal gradient via a Bismut weight on [0, lam] and the dual on [lam, T].

    ``lam`` defaults to sqrt(T) and is rounded to the nearest grid node.
    """
    lam = math.sqrt(T) if lam is None else lam
    if not 0 < lam <= T / 2:
        raise ValueError("need 0 < lam <= T/2")
    grid = default_grid(T, steps)
    k = max(1, int(round(lam / grid.dt)))

    def work(r):
        vals, ok = mixed_samples(f, x, drivers(grid, seed, *r), grid.dt, k)
        return Partial.of(vals), int(np.sum(~ok))

    parts, sing = zip(*mapper(work, batches(replicates, steps=grid.steps)))
    bad = sum(sing)
    check_singular(bad, replicates)
    return mc_reduce(parts, seed, T=T, estimator="mixed", function=f.name,
                     lam=k * grid.dt, singular=bad)


def weighted_gradient(f: TestFunction, x: KineticState, T: float, replicates: int,
                      seed: int, v=None, lam: Optional[float] = None,
                      steps: Optional[int] = None, mapper=map) -> tuple:
    """Gradient estimate E[f(X_T) W] together with E[W^2], from one pass.

    With a direction ``v`` the weight W is ``-delta h``; without one it is the
    mixed horizontal weight ``B_lam / lam - delta'`` (lam defaults to sqrt T).
    Since ``|grad| <= ||f||_inf sqrt(E W^2)`` the second estimate tracks the
    decay rate of the gradient bound.
    """
    grid = default_grid(T, steps)
    if v is None:
        lam = math.sqrt(T) if lam is None else lam
        if not 0 < lam <= T / 2:
            raise ValueError("need 0 < lam <= T/2")
        k = max(1, int(round(lam / grid.dt)))
    one = get("const")

    def work(r):
        B = drivers(grid, seed, *r)
        if v is None:
            w, ok = mixed_samples(one, x, B, grid.dt, k)
            U, Z = endpoint(x, B[ok], grid.dt)
        else:
            db = dual_batch(x, B, grid.dt)
            w, ok = ibp_weights(db, x, v), db.ok
            U, Z = db.U[ok], db.Z[ok]
        return Partial.of(f(U, Z) * w), Partial.of(w * w), int(np.sum(~ok))

    parts, sq, sing = zip(*mapper(work, batches(replicates, steps=grid.steps)))
    bad = sum(sing)
    check_singular(bad, replicates)
    meta = dict(T=T, function=f.name, singular=bad)
    if v is None:
        meta["lam"] = k * grid.dt
    return mc_reduce(parts, seed, **meta), mc_reduce(sq, seed, **meta)


# ---------------------------------------------------------------- coupling

@dataclass(frozen=True)
class CouplingRecord:
    T: float
    mode: str
    u0: float
    difference: Estimate  # (P_T f(c+u0) - P_T f(c-u0)) / (2 u0)
    survival: Estimate  # P(tau > T/2)
    survival_exact: float  # 2 Phi(u0 / sqrt(T/2)) - 1, line mode
    A: Estimate  # E[(f - f~) 1{tau > T/2}]
    A_bound: float  # 2 ||f|| u0 / (sqrt(2 pi) sqrt(T/2))
    exit_pi: float  # fraction of met pairs meeting at pi (circle)
    meta: dict = field(default_factory=dict)

    @property
    def statistic(self) -> float:
        return abs(self.difference.mean)

    @property
    def A_ok(self) -> bool:
        return abs(self.A.mean) <= self.A_bound

    @property
    def reflection_envelope(self) -> float:
        """Upper bound sqrt(2) u0 / (sqrt(pi) sqrt(T/2)) on P(tau > T/2)."""
        return math.sqrt(2) * self.u0 / (math.sqrt(math.pi) * math.sqrt(self.T / 2))


def hitting_survival(u0: float, t: float) -> float:
    """P(tau_0 > t) for Brownian motion started at u0 > 0."""
    return float(2 * ndtr(u0 / math.sqrt(t)) - 1)


def meeting_index(D: np.ndarray, unif: np.ndarray, dt: float, circle: bool) -> tuple:
    """First node after the distance process D hits 0 (or pi on the circle).

    A crossing inside cell j of a Brownian bridge between levels a, b on
    the same side of a barrier has probability exp(-2 a b / dt).  Returns
    (index, at_pi) with index = n+1 when there is no meeting.
    """
    a, b = D[..., :-1], D[..., 1:]
    p0 = np.where(a * b <= 0, 1.0, np.exp(-2 * np.clip(a * b, 0, None) / dt))
    hit = unif < p0
    at_pi = np.zeros_like(hit)
    if circle:
        ap, bp = math.pi - a, math.pi - b
        ppi = np.where(ap * bp <= 0, 1.0, np.exp(-2 * np.clip(ap * bp, 0, None) / dt))
        at_pi = (unif < ppi) & (ppi > p0)
        hit = hit | at_pi
    met = hit.any(axis=-1)
    first = np.argmax(hit, axis=-1)
    idx = np.where(met, first + 1, D.shape[-1])
    pi_side = np.take_along_axis(at_pi, first[..., None], -1)[..., 0] & met
    return idx, pi_side


def coupling_experiment(f: TestFunction, u0: float, z: complex,
                        T: Sequence[float], replicates: int, seed: int,
                        mode: str = "circle", center: float = 0.0,
                        steps_per_unit: int = 8, batch: int = 500,
                        mapper=map) -> list:
    """Mirror coupling of angles started at center +- u0, one record per T.

    All horizons share the same replicates (common random numbers); the
    pair is simulated on [0, max T] and read off at each horizon.
    """
    if u0 <= 0:
        raise ValueError("u0 must be positive")
    if mode not in ("line", "circle"):
        raise ValueError("mode must be 'line' or 'circle'")
    T = sorted(float(t) for t in T)
    idx_T = [t * steps_per_unit for t in T]
    if any(abs(i - round(i)) > 1e-9 or round(i) % 2 for i in idx_T):
        raise ValueError("each T/2 must be a grid node")
    idx_T = [int(round(i)) for i in idx_T]
    grid = TimeGrid(T[-1], idx_T[-1])
    dt, circle = grid.dt, mode == "circle"

    def work(r):
        lo, hi = r
        B = drivers(grid, seed, lo, hi)
        unif = rng.uniform_block(seed, range(lo, hi), grid.steps, rng.BRIDGE)
        D = u0 + B
        idx, pi_side = meeting_index(D, unif, dt, circle)
        U = center + D
        nodes = np.arange(grid.steps + 1)
        after = nodes[None, :] >= idx[:, None]
        Ut = np.where(after, U - 2 * math.pi * pi_side[:, None], 2 * center - U)
        Z = z + quad.cumtrapz(np.exp(1j * U), dt)
        Zt = z + quad.cumtrapz(np.exp(1j * Ut), dt)
        rows = []
        for n in idx_T:
            d = f(U[:, n], Z[:, n]) - f(Ut[:, n], Zt[:, n])
            alive = idx > n // 2
            rows.append((Partial.of(d / (2 * u0)), Partial.of(alive.astype(float)),
                         Partial.of(d * alive)))
        return rows, int(np.sum(idx <= grid.steps)), int(np.sum(pi_side))

    results = list(mapper(work, batches(replicates, batch, grid.steps)))
    met_all = sum(r[1] for r in results)
    met_pi = sum(r[2] for r in results)
    diff = [[r[0][j][0] for r in results] for j in range(len(T))]
    surv = [[r[0][j][1] for r in results] for j in range(len(T))]
    Aterm = [[r[0][j][2] for r in results] for j in range(len(T))]
    out = []
    for j, t in enumerate(T):
        out.append(CouplingRecord(
            t, mode, u0,
            mc_reduce(diff[j], seed, T=t),
            mc_reduce(surv[j], seed, T=t),
            hitting_survival(u0, t / 2),
            mc_reduce(Aterm[j], seed, T=t),
            2 * f.sup * u0 / (math.sqrt(2 * math.pi) * math.sqrt(t / 2)),
            met_pi / met_all if met_all else math.nan,
            {"center": center, "dt": dt, "function": f.name}))
    return out


# ---------------------------------------------------------------- rates

@dataclass(frozen=True)
class RateFit:
    T: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    stderr: float
    ci: tuple

    def within(self, lo: float, hi: float) -> bool:
        return lo < self.slope < hi


def rate_fit(T_grid, values, level: float = 0.95) -> RateFit:
    """OLS of log(value) on log(T) with a t-interval for the slope."""
    T = np.asarray(T_grid, dtype=float)
    y = np.asarray(values, dtype=float)
    if T.size != y.size:
        raise ValueError("T grid and statistics differ in length")
    if T.size < 4:
        raise ValueError("need at least 4 grid points")
    if np.any(y <= 0) or np.any(T <= 0):
        raise ValueError("statistics must be positive for a log-log fit")
    res = sps.linregress(np.log(T), np.log(y))
    half = sps.t.ppf(0.5 + level / 2, T.size - 2) * res.stderr
    ci = (res.slope - half, res.slope + half)
    if not all(math.isfinite(c) for c in ci):
        raise ValueError("degenerate confidence interval")
    return RateFit(T, y, float(res.slope), float(res.intercept),
                   float(res.stderr), ci)
