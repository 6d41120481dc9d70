"""Samplers for the large-T limits of the renormalized Gram matrix and dual row.

From a planar Brownian motion W on [0, 1], with I(r) = (1, sqrt2 W_r):

    G = int_0^1 I I^T dr,
    N = sqrt2 int_0^1 [S1(t) I_t^T + I_t^T G^{-1} S2(t)] dt  G^{-1},

where ``S1(t) = int_0^t c_s^T G^{-1} dY_s`` and ``S2(t) = int_0^t c_s dY_s^T``
are Ito integrals (left-point sums), ``c_s = (s, sqrt2 int_0^s W)`` and
``dY = (0, i dW) = (0, -dW^2, dW^1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import quad, rng
from ..paths import TimeGrid, batch_size, unit_steps
from ..rng import SeedSpec
from ..stats import estimate
from .control import check_invertible, singular_mask, unit_gram

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class LimitSample:
    G: np.ndarray  # (..., 3, 3)
    N: np.ndarray  # (..., 3)
    W: np.ndarray  # (..., 2, n+1)


def planar_bm(seed: int, streams, steps: int) -> np.ndarray:
    """Planar Brownian motion on [0, 1], shape (m, 2, steps+1)."""
    z = rng.normal_block(seed, streams, 2 * steps, rng.PLANAR)
    W = np.zeros((z.shape[0], 2, steps + 1))
    np.cumsum(z.reshape(-1, 2, steps) / math.sqrt(steps), axis=-1, out=W[..., 1:])
    return W


def limit_gram(W: np.ndarray) -> np.ndarray:
    ds = 1.0 / (W.shape[-1] - 1)
    I = np.empty(W.shape[:-2] + (3, W.shape[-1]))
    I[..., 0, :] = 1.0
    I[..., 1:, :] = SQRT2 * W
    G = quad.gram(I, ds)
    G[..., 0, 0] = 1.0
    return G


def limit_row(W: np.ndarray, G: np.ndarray) -> np.ndarray:
    n1 = W.shape[-1]
    ds = 1.0 / (n1 - 1)
    check_invertible(G)
    Gi = np.linalg.inv(G)
    I = np.empty(W.shape[:-2] + (3, n1))
    I[..., 0, :] = 1.0
    I[..., 1:, :] = SQRT2 * W
    c = np.empty_like(I)
    c[..., 0, :] = np.arange(n1) * ds
    c[..., 1:, :] = SQRT2 * quad.cumtrapz(W, ds)
    dW = np.diff(W, axis=-1)
    dY = np.stack([-dW[..., 1, :], dW[..., 0, :]], axis=-2)  # (..., 2, n)
    cl = c[..., :-1]  # left points
    GdY = np.einsum("...ij,...jn->...in", Gi[..., :, 1:], dY)
    S1 = np.zeros(W.shape[:-2] + (n1,))
    np.cumsum(np.sum(cl * GdY, axis=-2), axis=-1, out=S1[..., 1:])
    S2 = np.zeros(W.shape[:-2] + (3, 2, n1))
    np.cumsum(cl[..., :, None, :] * dY[..., None, :, :], axis=-1, out=S2[..., 1:])
    GI = np.einsum("...ij,...jn->...in", Gi, I)
    F = S1[..., None, :] * I
    F[..., 1:, :] += np.einsum("...kn,...kln->...ln", GI, S2)
    return SQRT2 * np.einsum("...i,...ij->...j", quad.trapz(F, ds), Gi)


def sample_limit(seed: int, streams, steps: int) -> LimitSample:
    W = planar_bm(seed, streams, steps)
    G = limit_gram(W)
    return LimitSample(G, limit_row(W, G), W)


def sample_limit_G(seed: SeedSpec, grid: TimeGrid) -> LimitSample:
    """One draw of G (the row N is left as NaN)."""
    W = planar_bm(seed.seed, [seed.stream], grid.steps)[0]
    return LimitSample(limit_gram(W), np.full(3, np.nan), W)


def sample_limit_N(seed: SeedSpec, grid: TimeGrid) -> LimitSample:
    """One draw of (G, N) from a single planar path."""
    s = sample_limit(seed.seed, [seed.stream], grid.steps)
    return LimitSample(s.G[0], s.N[0], s.W[0])


# ---------------------------------------------------------------- probes

def inverse_moment_probe(T_grid, p_grid, paths: int, seed: int,
                         steps=None, batch: int = 64, mapper=map) -> list:
    """E ||C~(T)^{-1}||^p (spectral norm) per (T, p), as table rows.

    Singular samples are counted in the ``singular`` column and excluded
    from the mean.
    """
    rows = []
    for T in T_grid:
        if T < math.sqrt(2.0):
            raise ValueError(f"T={T} below sqrt(2)")
        n = steps or unit_steps(T)
        size = batch_size(n, batch)

        def work(lo, n=n, T=T, size=size):
            z = rng.normal_block(seed, range(lo, min(paths, lo + size)), n)
            B = np.zeros((z.shape[0], n + 1))
            np.cumsum(z / math.sqrt(n), axis=-1, out=B[:, 1:])
            G = unit_gram(B, T)
            sing = singular_mask(G)
            ev = np.linalg.eigvalsh(G[~sing])
            return 1.0 / ev[:, 0], int(np.sum(sing))

        parts, sing = zip(*mapper(work, range(0, paths, size)))
        norms, bad = np.concatenate(parts), sum(sing)
        for p in p_grid:
            est = estimate(norms ** p)
            rows.append({"T": T, "p": p, "steps": n, "mean": est.mean,
                         "stderr": est.stderr, "paths": est.n, "singular": bad})
    return rows


@dataclass(frozen=True)
class RenormalizedSample:
    """C~(T) and N~(T) on nonsingular paths, plus the singular count."""
    T: float
    steps: int
    G: np.ndarray  # (m, 3, 3)
    N: np.ndarray  # (m, 3)
    singular: int

    def delta(self, v) -> np.ndarray:
        """delta h at base angle 0 for direction v (unscaled)."""
        s = np.array([1.0, math.sqrt(self.T), math.sqrt(self.T)])
        return -(self.N @ (np.asarray(v, dtype=float) / s))


def renormalized_scan(T_grid, paths: int, seed: int, steps=None,
                      batch=None, dual: bool = True, mapper=map) -> dict:
    """C~(T) and N~(T) for every T in ``T_grid`` from shared unit paths.

    Each replicate draws one path on [0, 1] with ``steps`` cells for the
    largest T (default by ``unit_steps``); smaller horizons use the same path
    subsampled by T_max / T, which must divide ``steps``.  The result maps
    T to a ``RenormalizedSample``; with ``dual=False`` only C~ is computed
    and N~ is left empty.
    """
    from ..gradients import dual_batch
    from ..kbm import KineticState

    T_grid = sorted(float(t) for t in T_grid)
    T_max = T_grid[-1]
    n = steps or unit_steps(T_max)
    factors = []
    for T in T_grid:
        k = T_max / T
        if abs(k - round(k)) > 1e-9 or n % int(round(k)):
            raise ValueError(f"T={T} does not subsample the grid of T={T_max}")
        factors.append(int(round(k)))
    batch = batch or batch_size(n, 64)
    x0 = KineticState(0.0)

    def work(lo):
        z = rng.normal_block(seed, range(lo, min(paths, lo + batch)), n)
        unit = np.zeros((z.shape[0], n + 1))
        np.cumsum(z / math.sqrt(n), axis=-1, out=unit[:, 1:])
        out = []
        for T, k in zip(T_grid, factors):
            if not dual:
                G = unit_gram(unit[:, ::k], T)
                sing = singular_mask(G)
                out.append((G[~sing], np.empty((0, 3)), int(np.sum(sing))))
                continue
            m = n // k
            d = np.array([math.sqrt(T), T, T])
            db = dual_batch(x0, math.sqrt(T) * unit[:, ::k], T / m)
            G = db.C[db.ok] / np.multiply.outer(d, d)
            out.append((G, db.N[db.ok] * np.array([1.0, math.sqrt(T), math.sqrt(T)]),
                        db.singular))
        return out

    results = list(mapper(work, range(0, paths, batch)))
    scan = {}
    for j, (T, k) in enumerate(zip(T_grid, factors)):
        scan[T] = RenormalizedSample(
            T, n // k,
            np.concatenate([r[j][0] for r in results]),
            np.concatenate([r[j][1] for r in results]),
            sum(r[j][2] for r in results))
    return scan


def limit_batch(paths: int, seed: int, steps: int = 4096, batch: int = 256,
                mapper=map) -> LimitSample:
    """``paths`` draws of (G, N) stacked; W is not kept."""
    def work(lo):
        s = sample_limit(seed, range(lo, min(paths, lo + batch)), steps)
        return s.G, s.N

    G, N = zip(*mapper(work, range(0, paths, batch)))
    return LimitSample(np.concatenate(G), np.concatenate(N), np.empty((0, 2, steps + 1)))
