import numpy as np
import pytest

from seesmp.bsie import (OperatorProcess, apriori_diagnostics, bsie_picard, continuity_probe,
                         contraction_threshold, lyapunov_ode_reference, matrix_bsde_backward,
                         stability_ratio)
from seesmp.core import GalerkinSystem, build_time_grid, sample_brownian

A2 = np.array([[-1.0, 0.3], [0.2, -0.6]])
B2 = np.array([[0.3, 0.1], [-0.1, 0.2]])


@pytest.fixture(scope="module")
def ens():
    return sample_brownian(build_time_grid(1.0, 32), 4000, 2)


@pytest.mark.exact
def test_zero_data_one_iteration(ens):
    op = bsie_picard(GalerkinSystem(A2, B2), np.zeros((2, 2)), None, 0.0, ens)
    assert np.all(op.P == 0.0) and op.iterations <= 1


@pytest.mark.exact
def test_matrix_bsde_zero_data(ens):
    op = matrix_bsde_backward(GalerkinSystem(A2, B2), np.zeros((2, 2)), None, 0.0, ens)
    assert np.all(op.P == 0.0)
    assert op.Q is None or np.all(op.Q == 0.0)


@pytest.mark.exact
def test_symmetry_preserved(ens):
    op = bsie_picard(GalerkinSystem(A2, B2), np.array([[1.0, 0.2], [0.2, 0.5]]),
                     lambda t, P: 0.5 * P, 0.0, ens)
    asym = np.max(np.linalg.norm(op.P - np.swapaxes(op.P, 1, 2), axis=(1, 2)))
    assert asym <= 1e-8 * np.abs(op.P).max()


@pytest.mark.exact
def test_apriori_zero_data(ens):
    op = bsie_picard(GalerkinSystem(A2, B2), np.zeros((2, 2)), None, 0.0, ens)
    assert np.all(apriori_diagnostics(op, np.zeros((2, 2)), None, ens)["ratios"] == 0.0)


@pytest.mark.exact
def test_doubling_terminal_doubles_solution(ens):
    s = GalerkinSystem(A2, B2)
    xi = np.array([[1.0, 0.1], [0.1, 0.4]])
    one = bsie_picard(s, xi, lambda t, P: 0.3 * P, 0.0, ens)
    two = bsie_picard(s, 2 * xi, lambda t, P: 0.3 * P, 0.0, ens)
    np.testing.assert_allclose(two.P, 2 * one.P, rtol=1e-12, atol=0)


@pytest.mark.exact
def test_continuity_constant_process():
    g = build_time_grid(1.0, 8)
    op = OperatorProcess(g, np.broadcast_to(np.eye(2), (9, 2, 2)).copy())
    assert continuity_probe(op, [1.0, 0.0], [0.0, 1.0]) == [(g.dt, 0.0)]
    assert continuity_probe(op, [1.0, 1.0], [1.0, 1.0]) == [(g.dt, 0.0)]


def test_scalar_closed_form():
    a, b = -0.5, 0.5
    g = build_time_grid(1.0, 64)
    e = sample_brownian(g, 100000, 1)
    op = bsie_picard(GalerkinSystem(np.array([[a]]), np.array([[b]])), np.eye(1), None, 0.0, e)
    lam = 2 * a + b * b
    exact = np.exp(lam * (1.0 - g.nodes))
    bound = 3 * op.stderr[:, 0, 0] + 2 * g.dt * abs(lam) * exact
    assert np.all(np.abs(op.P[:, 0, 0] - exact) <= bound)


@pytest.mark.parametrize("f", [None, lambda t, P: P])
def test_routes_agree_with_lyapunov_reference(f):
    s = GalerkinSystem(A2, B2)
    g = build_time_grid(1.0, 128)
    op = bsie_picard(s, np.eye(2), f, 0.0, sample_brownian(g, 100000, 4))
    mb = matrix_bsde_backward(s, np.eye(2), f, 0.0, sample_brownian(g.refine(4), 1, 1))
    ref = lyapunov_ode_reference(s, np.eye(2), f, 1.0, g.nodes)
    rel = np.linalg.norm(op.P - mb.P[::4], axis=(1, 2)) / np.linalg.norm(mb.P[::4], axis=(1, 2))
    assert rel.max() <= 1e-2
    rel_ref = np.linalg.norm(mb.P[::4] - ref, axis=(1, 2)) / np.linalg.norm(ref, axis=(1, 2))
    assert rel_ref.max() <= 1e-2


def test_beta_cancels_in_expectation(ens):
    s = GalerkinSystem(A2, B2)
    d0 = bsie_picard(s, np.eye(2), None, 0.0, ens)
    d1 = bsie_picard(s, np.eye(2), None, 0.7, ens)
    assert np.abs(d0.P - d1.P).max() <= 0.05 * np.abs(d0.P).max()


def test_stability_ratio_identical_inputs(ens):
    s = GalerkinSystem(A2, B2)
    op = bsie_picard(s, np.eye(2), None, 0.0, ens)
    assert stability_ratio(op, op, np.eye(2), np.eye(2), None, None) == 0.0


def test_horizon_splitting_handles_strong_generator():
    s = GalerkinSystem(A2, B2)
    f = lambda t, P: 8 * P
    g = build_time_grid(1.0, 128)
    e = sample_brownian(g, 4000, 2)
    big = bsie_picard(s, np.eye(2), f, 0.0, e, max_iter=15)
    assert len(big.segments) > 1
    ref = lyapunov_ode_reference(s, np.eye(2), f, 1.0, g.nodes)
    assert np.abs(big.P - ref).max() / np.abs(ref).max() <= 3e-2
    finer = bsie_picard(s, np.eye(2), f, 0.0, e, segments=16)
    assert np.abs(big.P - finer.P).max() / np.abs(finer.P).max() <= 2e-2
    assert contraction_threshold(s, 8.0, e) > 0


def test_path_dependent_terminal_mean_matches_matrix_bsde(ens):
    from seesmp.forward import solve_linear_see
    s = GalerkinSystem(A2, B2)
    x = solve_linear_see(s, ens, np.array([1.0, 0.5]))
    xi = np.einsum("pi,pj->pij", x.values[:, -1], x.values[:, -1])
    op = bsie_picard(s, xi, lambda t, P: 0.5 * P, 0.3, ens, x_paths=x)
    mb = matrix_bsde_backward(s, xi, lambda t, P: 0.5 * P, 0.3, ens, x_paths=x)
    assert np.abs(op.mean() - mb.mean()).max() / np.abs(mb.mean()).max() <= 5e-2
