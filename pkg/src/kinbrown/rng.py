"""Counter-based random streams.

Every Monte Carlo replicate owns one Philox stream keyed by
``(master seed, purpose, stream index)``.  A replicate's draws therefore do
not depend on how replicates are batched or scheduled across workers.
Gaussians come from the inverse normal CDF applied to the uniforms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import ndtri

MASK64 = (1 << 64) - 1
_STREAM_BITS = 48

# purpose tags keep independent uses of one replicate index apart
DRIVER = 0
COEFFICIENTS = 1
BRIDGE = 2
BOOTSTRAP = 3
LIMIT = 4
PLANAR = 5


@dataclass(frozen=True)
class SeedSpec:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= self.stream < (1 << _STREAM_BITS):
            raise ValueError(f"stream index out of range: {self.stream}")

    def substream(self, i: int) -> "SeedSpec":
        return SeedSpec(self.seed, self.stream + i)


def generator(spec: SeedSpec, purpose: int = DRIVER) -> np.random.Generator:
    hi = (purpose << _STREAM_BITS) | spec.stream
    key = (spec.seed & MASK64) | (hi << 64)
    return np.random.Generator(np.random.Philox(key=key))


def uniforms(spec: SeedSpec, size, purpose: int = DRIVER) -> np.ndarray:
    u = generator(spec, purpose).random(size)
    # ndtri(0) = -inf; Philox doubles are in [0, 1)
    u[u == 0.0] = np.finfo(float).tiny
    return u


def normals(spec: SeedSpec, size, purpose: int = DRIVER) -> np.ndarray:
    return ndtri(uniforms(spec, size, purpose))


def normal_block(seed: int, streams: Iterable[int], size: int,
                 purpose: int = DRIVER) -> np.ndarray:
    """Stack ``normals`` for several replicate streams, one row each."""
    streams = list(streams)
    out = np.empty((len(streams), size))
    for row, s in enumerate(streams):
        out[row] = normals(SeedSpec(seed, s), size, purpose)
    return out


def uniform_block(seed: int, streams: Iterable[int], size: int,
                  purpose: int = DRIVER) -> np.ndarray:
    streams = list(streams)
    out = np.empty((len(streams), size))
    for row, s in enumerate(streams):
        out[row] = uniforms(SeedSpec(seed, s), size, purpose)
    return out
