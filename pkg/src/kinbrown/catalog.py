"""Bounded smooth test functions on R x C with analytic derivatives.

Each entry is vectorized over arrays ``u``, ``z`` (complex).  ``grad``
returns the stacked partials (d/du, d/dRe z, d/dIm z) and ``generator``
returns ``L f = 1/2 f_uu + cos(u) f_{z1} + sin(u) f_{z2}``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # not a pytest class

    name: str
    f: Callable
    grad: Callable
    generator: Callable
    sup: float  # sup norm

    def __call__(self, u, z):
        return self.f(np.asarray(u, dtype=float), np.asarray(z, dtype=complex))

    def derivative(self, u, z, v) -> np.ndarray:
        """(d_x f, v) for v = (v_R, Re v_C, Im v_C)."""
        g = self.grad(np.asarray(u, dtype=float), np.asarray(z, dtype=complex))
        v = np.asarray(v, dtype=float)
        return g[0] * v[0] + g[1] * v[1] + g[2] * v[2]


def _stack(*parts):
    parts = np.broadcast_arrays(*parts)
    return np.stack(parts)


def _gauss_cos():
    def f(u, z):
        return np.exp(-0.5 * np.abs(z) ** 2) * np.cos(u)

    def grad(u, z):
        e = np.exp(-0.5 * np.abs(z) ** 2)
        return _stack(-e * np.sin(u), -z.real * e * np.cos(u), -z.imag * e * np.cos(u))

    def gen(u, z):
        e = np.exp(-0.5 * np.abs(z) ** 2)
        return e * np.cos(u) * (-0.5 - z.real * np.cos(u) - z.imag * np.sin(u))

    return TestFunction("gauss_cos_u", f, grad, gen, 1.0)


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


CATALOG = {
    "const": TestFunction(
        "const",
        lambda u, z: np.ones(np.broadcast_shapes(np.shape(u), np.shape(z))),
        lambda u, z: _stack(0.0 * u, 0.0 * z.real, 0.0 * z.real),
        lambda u, z: np.zeros(np.broadcast_shapes(np.shape(u), np.shape(z))),
        1.0),
    "sin_u": TestFunction(
        "sin_u",
        lambda u, z: np.sin(u) + 0.0 * z.real,
        lambda u, z: _stack(np.cos(u), 0.0 * z.real, 0.0 * z.real),
        lambda u, z: -0.5 * np.sin(u) + 0.0 * z.real,
        1.0),
    "cos_u": TestFunction(
        "cos_u",
        lambda u, z: np.cos(u) + 0.0 * z.real,
        lambda u, z: _stack(-np.sin(u), 0.0 * z.real, 0.0 * z.real),
        lambda u, z: -0.5 * np.cos(u) + 0.0 * z.real,
        1.0),
    "sin_re_z": TestFunction(
        "sin_re_z",
        lambda u, z: np.sin(z.real) + 0.0 * u,
        lambda u, z: _stack(0.0 * u, np.cos(z.real), 0.0 * z.real),
        lambda u, z: np.cos(u) * np.cos(z.real),
        1.0),
    "gauss_cos_u": _gauss_cos(),
    "tanh_re_z": TestFunction(
        "tanh_re_z",
        lambda u, z: np.tanh(z.real) + 0.0 * u,
        lambda u, z: _stack(0.0 * u, _sech2(z.real), 0.0 * z.real),
        lambda u, z: np.cos(u) * _sech2(z.real),
        1.0),
}


def get(name: str) -> TestFunction:
    try:
        return CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown test function {name!r}; "
                       f"choose from {sorted(CATALOG)}") from None
