import math
import warnings

import numpy as np
import pytest

from kinbrown import quad
from kinbrown.kbm import KineticState, flow, rotation, tangent
from kinbrown.malliavin import (SingularMatrix, basis_columns, control_functions,
                                control_residual, dual_basis_truncated, dual_direct,
                                dual_explicit, dual_rows, inverse, inverse_moment_probe,
                                limit_batch, malliavin_derivative, matrix_gram,
                                matrix_reduced, renormalize, renormalized_scan,
                                sample_limit_G, sample_limit_N, solve_control, unit_gram)
from kinbrown.malliavin.control import frame_functions
from kinbrown.paths import (BrownianPath, GaussianCoefficients, TimeGrid, rescale_to_unit,
                            sample_increments, sample_kl_path)
from kinbrown.rng import SeedSpec


def random_flow(T=4.0, n=2048, u=0.7, z=0.3 + 0.2j, stream=0):
    p = sample_increments(TimeGrid(T, n), SeedSpec(1, stream))
    return flow(KineticState(u, z), p)


def test_zero_path_gram():
    T, n = 2.0, 4000
    kp = flow(KineticState(0.0), BrownianPath(TimeGrid(T, n), np.zeros(n + 1)))
    C = matrix_reduced(kp).matrix
    expected = np.array([[T, 0, -T ** 2 / 2], [0, 0, 0], [-T ** 2 / 2, 0, T ** 3 / 3]])
    assert np.allclose(C[:, :2], expected[:, :2], atol=1e-12)
    assert C[0, 2] == pytest.approx(-T ** 2 / 2, rel=1e-12)
    assert C[2, 2] == pytest.approx(T ** 3 / 3, rel=1e-6)


def test_zero_path_is_singular():
    kp = flow(KineticState(0.0), BrownianPath(TimeGrid(1.0, 100), np.zeros(101)))
    with pytest.raises(SingularMatrix):
        inverse(matrix_reduced(kp))


def test_gram_equals_reduced():
    kp = random_flow()
    Mg = matrix_gram(control_functions(kp)).matrix
    Mr = matrix_reduced(kp).matrix
    assert np.linalg.norm(Mg - Mr) / np.linalg.norm(Mr) < 1e-12


def test_rotation_covariance():
    p = sample_increments(TimeGrid(3.0, 1024), SeedSpec(5))
    M0 = matrix_reduced(flow(KineticState(0.0), p)).matrix
    Mu = matrix_reduced(flow(KineticState(2.1, 1 - 1j), p)).matrix
    R = rotation(2.1)
    assert np.linalg.norm(R @ M0 @ R.T - Mu) / np.linalg.norm(M0) < 1e-12


@pytest.mark.parametrize("v", [[1.0, 0, 0], [0, 1.0, 0], [0.3, -1.0, 0.5]])
def test_control_identities(v):
    kp = random_flow()
    cf = control_functions(kp)
    M = matrix_gram(cf)
    sol = solve_control(M, cf, v)
    assert np.max(np.abs(control_residual(M, cf, sol))) < 1e-10
    D = malliavin_derivative(kp, sol.cells)
    assert np.max(np.abs(tangent(kp, -1) @ np.asarray(v) + D)) < 1e-9
    D2 = malliavin_derivative(kp, sol.cells, rearranged=True)
    assert np.allclose(D, D2, atol=1e-10)


def test_malliavin_derivative_linear():
    kp = random_flow(n=512)
    h1 = np.sin(np.arange(512) / 50)
    h2 = np.ones(512)
    lhs = malliavin_derivative(kp, 2 * h1 - 3 * h2)
    rhs = 2 * malliavin_derivative(kp, h1) - 3 * malliavin_derivative(kp, h2)
    assert np.allclose(lhs, rhs, atol=1e-12)
    with pytest.raises(ValueError):
        malliavin_derivative(kp, np.ones(3))


def test_derivative_matches_path_perturbation():
    # D X_T(h) is the derivative of X_T along B + eps int h
    kp = random_flow(T=2.0, n=400)
    h = np.cos(np.arange(400) / 30)
    eps = 1e-6
    H = np.concatenate([[0.0], np.cumsum(h) * kp.grid.dt])
    plus = flow(kp.start, BrownianPath(kp.grid, kp.driver.values + eps * H))
    minus = flow(kp.start, BrownianPath(kp.grid, kp.driver.values - eps * H))
    fd = np.array([(plus.U[-1] - minus.U[-1]) / (2 * eps),
                   ((plus.Z[-1] - minus.Z[-1]) / (2 * eps)).real,
                   ((plus.Z[-1] - minus.Z[-1]) / (2 * eps)).imag])
    assert np.allclose(malliavin_derivative(kp, h), fd, atol=1e-7)


def test_dual_rows_match_direct():
    g = TimeGrid(2.0, 200)
    p = sample_increments(g, SeedSpec(2))
    Mi = inverse(matrix_reduced(flow(KineticState(0.0), p)), frame=True)
    a = dual_rows(p.values, g.dt, Mi)
    b = dual_direct(p.values, g.dt, Mi)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-10)


def test_dual_is_discrete_divergence():
    # sum h_j dB_j - dt sum_j dh_j/d(dB_j), with the trace by finite differences
    g = TimeGrid(1.5, 30)
    z0 = sample_increments(g, SeedSpec(4)).values
    y = np.array([0.2, 0.7, -0.4])

    def gram(B):
        w = frame_functions(B, g.dt)[2]
        C = quad.cell_gram(w, g.dt)
        C[0, 0] = g.horizon
        return C, w

    def cells(B):
        C, w = gram(B)
        return -np.linalg.solve(C, y) @ w

    dB = np.diff(z0)
    h = cells(z0)
    trace = 0.0
    eps = 1e-6
    for i in range(g.steps):
        bump = np.zeros(g.steps + 1)
        bump[i + 1:] = eps
        trace += (cells(z0 + bump)[i] - cells(z0 - bump)[i]) / (2 * eps)
    delta = h @ dB - g.dt * trace
    Minv = np.linalg.inv(gram(z0)[0])
    assert delta == pytest.approx(-dual_rows(z0, g.dt, Minv) @ y, rel=1e-6)


def test_dual_explicit_rotation_and_linearity():
    kp = random_flow(n=1024)
    v1, v2 = np.array([1.0, 0, 0]), np.array([0, 0.5, -1.0])
    d1 = dual_explicit(kp, None, v1)
    d2 = dual_explicit(kp, None, v2)
    d12 = dual_explicit(kp, None, v1 + 2 * v2)
    assert d12.delta == pytest.approx(d1.delta + 2 * d2.delta, rel=1e-10)
    assert d1.for_direction(v2) == pytest.approx(d2.delta, rel=1e-12)


def test_basis_columns():
    kp = flow(KineticState(0.0), sample_kl_path(TimeGrid(4.0, 2048), 128, SeedSpec(3)))
    A = basis_columns(kp, 64)
    assert A[0, 0] == pytest.approx(2.0, rel=1e-12)
    assert np.allclose(A[0, 1:], 0.0, atol=1e-12)


def test_basis_gram_completeness():
    g = TimeGrid(4.0, 2048)
    kp = flow(KineticState(0.0), sample_increments(g, SeedSpec(6)))
    C = matrix_reduced(kp).matrix
    A = basis_columns(kp, 512)
    assert np.linalg.norm(A @ A.T - C) / np.linalg.norm(C) < 0.01


def test_basis_oracle_agrees_with_explicit():
    g = TimeGrid(4.0, 1024)
    x = KineticState(0.0)
    v = [0.0, 1.0, 0.0]
    xi = GaussianCoefficients.sample(512, SeedSpec(7))
    from kinbrown.malliavin import dual
    exact = dual.explicit_for_coefficients(xi, g, x, v)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        errs = [abs(dual_basis_truncated(xi, K, g, x, v) - exact) for K in (16, 64, 256)]
    assert errs[-1] < errs[0]
    assert errs[-1] < 0.05 * abs(exact) + 1e-3


def test_renormalize_matches_unit_gram():
    T, n = 9.0, 2048
    p = sample_increments(TimeGrid(T, n), SeedSpec(8))
    Ct = renormalize(matrix_reduced(flow(KineticState(0.0), p)))
    assert Ct[0, 0] == 1.0
    G = unit_gram(rescale_to_unit(p).values, T)
    assert np.allclose(Ct, G, rtol=1e-10, atol=1e-12)


def test_limit_gram_properties():
    s = sample_limit_G(SeedSpec(0), TimeGrid(1.0, 1024))
    G = s.G
    assert G[0, 0] == 1.0
    assert np.allclose(G, G.T)
    assert np.linalg.eigvalsh(G)[0] > 0
    N = sample_limit_N(SeedSpec(0), TimeGrid(1.0, 1024))
    assert np.allclose(N.G, G)
    assert np.all(np.isfinite(N.N))


def test_limit_gram_mean():
    # E G is the identity
    s = limit_batch(2000, 1, steps=256)
    m = s.G.mean(axis=0)
    se = s.G.std(axis=0, ddof=1) / math.sqrt(2000)
    expected = np.diag([1.0, 1.0, 1.0])
    assert np.all(np.abs(m - expected) <= 4 * se + 1e-12)


def test_renormalized_scan_shares_paths():
    scan = renormalized_scan([16.0, 64.0], 8, 2, steps=4096)
    grams = renormalized_scan([16.0, 64.0], 8, 2, steps=4096, dual=False)
    assert set(scan) == {16.0, 64.0}
    for T, s in scan.items():
        assert s.G.shape == (8, 3, 3)
        assert s.N.shape == (8, 3)
        assert np.allclose(s.G[:, 0, 0], 1.0)
        assert np.allclose(s.G, grams[T].G, rtol=1e-9, atol=1e-12)
    assert scan[16.0].steps == 1024
    with pytest.raises(ValueError):
        renormalized_scan([10.0, 64.0], 2, 0, steps=4096)


def test_inverse_moment_p_zero_is_one():
    rows = inverse_moment_probe([4.0], [0.0, 1.0], 20, 0, steps=256)
    assert rows[0]["mean"] == 1.0
    assert rows[0]["singular"] == 0
    assert rows[1]["mean"] >= 1.0
    with pytest.raises(ValueError):
        inverse_moment_probe([1.0], [1.0], 2, 0)
