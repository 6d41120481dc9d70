import math

import numpy as np
import pytest

from kinbrown import rng
from kinbrown.oscillate import (circle_mean, gaussian_negative_moment, ito_identity_residual,
                                iterated_osc_integral, lln_probe, negative_moment,
                                negative_moment_monotonicity, osc_integral, second_moment,
                                subgaussian_tail_probe, tail_sample)
from kinbrown.paths import BrownianPath, TimeGrid, sample_batch, sample_increments
from kinbrown.rng import SeedSpec


def unit_path(n=4096, stream=0):
    return sample_increments(TimeGrid(1.0, n), SeedSpec(11, stream))


def test_zero_oscillation_is_lebesgue_integral():
    p = unit_path()
    val = osc_integral(lambda s: np.ones_like(s), 0.0, p, t=0.4)
    assert val == pytest.approx([0.4, 0.0], abs=1e-12)


def test_zero_driver():
    g = TimeGrid(1.0, 100)
    p = BrownianPath(g, np.zeros(101))
    assert osc_integral(lambda s: s, 7.0, p) == pytest.approx([0.5, 0.0], abs=1e-12)


def test_vector_weight_componentwise():
    p = unit_path(512)
    a = osc_integral(lambda s: np.stack([np.ones_like(s), s]), 3.0, p)
    assert a.shape == (2, 2)
    assert np.allclose(a[0], osc_integral(lambda s: np.ones_like(s), 3.0, p))


def test_driver_must_be_unit():
    p = sample_increments(TimeGrid(2.0, 16), SeedSpec(0))
    with pytest.raises(ValueError):
        osc_integral(lambda s: s, 1.0, p)


def test_second_moment_formula():
    T = 100.0
    n = 8192
    p = sample_batch(TimeGrid(1.0, n), 3, range(4000))
    v = osc_integral(lambda s: np.ones_like(s), math.sqrt(T), p)
    x = T * np.sum(v ** 2, axis=-1)
    se = np.std(x, ddof=1) / math.sqrt(x.size)
    assert abs(np.mean(x) - second_moment(T)) < 3 * se


def test_iterated_integral_zero_oscillation():
    g = TimeGrid(1.0, 200)
    p = BrownianPath(g, np.zeros(201))
    M = iterated_osc_integral(lambda s: np.ones_like(s), lambda s: np.ones_like(s), 5.0, p)
    # int_0^1 s ds in the (Re, Re) slot, nothing else
    assert M == pytest.approx(np.array([[0.5, 0.0], [0.0, 0.0]]), abs=1e-12)


def test_iterated_integral_shrinks_with_oscillation():
    p = sample_batch(TimeGrid(1.0, 8192), 5, range(200))
    one = lambda s: np.ones_like(s)
    small = np.mean(np.abs(iterated_osc_integral(one, one, 2.0, p)))
    big = np.mean(np.abs(iterated_osc_integral(one, one, 40.0, p)))
    assert big < small / 4


def test_ito_identity_residual_vanishes_with_grid():
    res = []
    for n in (1024, 16384):
        p = sample_increments(TimeGrid(1.0, n), SeedSpec(1))
        r = ito_identity_residual(np.cos, lambda s: -np.sin(s), 10.0, p)
        assert r.bound_holds
        res.append(r.residual)
    # strong order 1/2: 16x finer grid, about 4x smaller
    assert res[1] < res[0] / 2


def test_lln_constant_function_is_zero():
    rows = lln_probe(lambda y: np.ones_like(y), lambda s: np.ones_like(s), [5.0], 8, 0,
                     steps=512)
    assert rows[0]["mean"] == pytest.approx(0.0, abs=1e-12)
    assert rows[0]["limit"] == pytest.approx(1.0)


def test_lln_deviation_decreases():
    rows = lln_probe(np.cos, lambda s: np.ones_like(s), [5.0, 40.0], 40, 1)
    assert rows[1]["mean"] < rows[0]["mean"]


def test_circle_mean():
    assert circle_mean(lambda y: np.sin(y) ** 2) == pytest.approx(0.5)
    assert circle_mean(np.cos) == pytest.approx(0.0, abs=1e-12)


def test_tail_sample_deterministic_and_bounded():
    a = tail_sample(0.3, 4.0, 100, 7)
    assert np.array_equal(a, tail_sample(0.3, 4.0, 100, 7))
    assert np.all(np.abs(a) <= 2.0 + 1e-12)
    with pytest.raises(ValueError):
        tail_sample(0.3, 0.5, 10, 0)


def test_tail_probe_monotone_and_subgaussian():
    prof = subgaussian_tail_probe(0.3, 16.0, 4000, [0.25, 0.5, 0.75, 1.0], seed=2)
    assert np.all(np.diff(prof.prob) <= 0)
    assert prof.slope < 0


def test_negative_moment_closed_form():
    for alpha in (0.25, 0.5, 0.9):
        v, _ = negative_moment(alpha, 2.0, 0.0)
        assert v == pytest.approx(gaussian_negative_moment(alpha, 2.0), rel=1e-7)


def test_negative_moment_symmetric_and_monotone():
    a, _ = negative_moment(0.5, 1.0, 0.7)
    b, _ = negative_moment(0.5, 1.0, -0.7)
    assert a == pytest.approx(b, rel=1e-9)
    rows = negative_moment_monotonicity(0.5, 1.0, [0.0, 0.5, -1.0, 2.0])
    assert rows[0]["monotone"]
    vals = sorted(rows, key=lambda r: abs(r["a"]))
    assert vals[0]["value"] > vals[-1]["value"]


def test_negative_moment_validation():
    with pytest.raises(ValueError):
        negative_moment(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        negative_moment(0.5, 0.0, 0.0)
