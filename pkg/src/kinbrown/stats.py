"""Monte Carlo statistics: estimates, mergeable partial sums, moment comparison."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import rng
from .rng import SeedSpec


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def z_score(self, target: float) -> float:
        if self.stderr == 0:
            return 0.0 if self.mean == target else math.inf
        return (self.mean - target) / self.stderr

    def agrees(self, target: float, k: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.mean - target) <= k * self.stderr + slack


@dataclass(frozen=True)
class Partial:
    """Sufficient statistics (n, sum x, sum x^2) of one batch."""
    n: int
    s1: float
    s2: float

    @classmethod
    def of(cls, x) -> "Partial":
        x = np.asarray(x, dtype=float).ravel()
        return cls(x.size, math.fsum(x), math.fsum(x * x))


def mc_reduce(parts: Iterable[Partial], seed: Optional[int] = None,
              **meta) -> Estimate:
    """Merge partials into an Estimate.

    Sums are taken with ``math.fsum`` (correctly rounded), so the result
    does not depend on merge order.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("cannot reduce an empty stream of partial statistics")
    n = sum(p.n for p in parts)
    if n == 0:
        raise ValueError("no samples in partial statistics")
    s1 = math.fsum(p.s1 for p in parts)
    s2 = math.fsum(p.s2 for p in parts)
    mean = s1 / n
    if n > 1:
        var = max(math.fsum([s2, -s1 * mean]) / (n - 1), 0.0)
        se = math.sqrt(var / n)
    else:
        se = math.inf
    return Estimate(mean, se, n, seed, dict(meta))


def estimate(x, seed: Optional[int] = None, **meta) -> Estimate:
    return mc_reduce([Partial.of(x)], seed, **meta)


def difference(a: Estimate, b: Estimate) -> Estimate:
    """a - b for independent estimates; s.e. combined in quadrature."""
    return Estimate(a.mean - b.mean, math.hypot(a.stderr, b.stderr), min(a.n, b.n))


def power_norm(x, p: float, seed: Optional[int] = None) -> Estimate:
    """(E|x|^p)^{1/p} with a delta-method standard error."""
    m = estimate(np.abs(np.asarray(x, dtype=float)) ** p)
    val = m.mean ** (1.0 / p)
    se = val * m.stderr / (p * m.mean) if m.mean > 0 else math.inf
    return Estimate(val, se, m.n, seed, {"p": p})


# ---------------------------------------------------------------- moments

@dataclass(frozen=True)
class MomentRow:
    label: str
    order: int
    moment_a: float
    moment_b: float
    diff: float
    stderr: float

    @property
    def z(self) -> float:
        if self.stderr == 0:
            return 0.0 if self.diff == 0 else math.inf
        return self.diff / self.stderr

    def within(self, k: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.diff) <= k * self.stderr + slack


def _bootstrap_se(x: np.ndarray, order: int, resamples: int,
                  gen: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    stats = np.empty((resamples,) + x.shape[1:])
    for b in range(resamples):
        idx = gen.integers(0, n, n)
        stats[b] = np.mean(x[idx] ** order, axis=0)
    return stats.std(axis=0, ddof=1)


def compare_moments(a, b, orders: Sequence[int] = (1, 2), resamples: int = 1000,
                    seed: int = 0, labels: Optional[Sequence[str]] = None) -> list:
    """Per-order difference of raw sample moments with bootstrap s.e.

    ``a`` and ``b`` have shape (samples, ...) with matching trailing shape;
    every trailing entry is compared separately.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both samples must be nonempty")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError("sample shapes differ")
    a2 = a.reshape(a.shape[0], -1)
    b2 = b.reshape(b.shape[0], -1)
    if labels is None:
        labels = [str(np.unravel_index(i, a.shape[1:])) if a.ndim > 1 else "x"
                  for i in range(a2.shape[1])]
    rows = []
    for order in orders:
        ga = rng.generator(SeedSpec(seed, order), rng.BOOTSTRAP)
        gb = rng.generator(SeedSpec(seed, 1000 + order), rng.BOOTSTRAP)
        ma = np.mean(a2 ** order, axis=0)
        mb = np.mean(b2 ** order, axis=0)
        if a2 is b2 or np.array_equal(a2, b2):
            se = np.zeros_like(ma)
        else:
            se = np.hypot(_bootstrap_se(a2, order, resamples, ga),
                          _bootstrap_se(b2, order, resamples, gb))
        for i, lab in enumerate(labels):
            rows.append(MomentRow(lab, order, float(ma[i]), float(mb[i]),
                                  float(ma[i] - mb[i]), float(se[i])))
    return rows
