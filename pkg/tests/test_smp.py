import numpy as np
import pytest

from seesmp.bsde import RegressionEngine
from seesmp.core import GalerkinSystem, SpikeSpec, build_time_grid, sample_brownian
from seesmp.errors import ConfigurationError, InvalidArgumentError
from seesmp.forward import solve_see
from seesmp.models import control_family, default_spde_system, piecewise_constant
from seesmp.smp import (brute_force_optimal, compute_adjoints, duality_value, hamiltonian,
                        interval_control, smp_verdict, solve_hat_bsde, solve_variational,
                        spike_control)

SYS = default_spde_system()
ENG = RegressionEngine(2)


def family(c1=0.5, c2=0.3, r=0.1, gamma=None, U=None, scale=1.0, Q=0.5, H=1.0, h1=(0.2, 0.1),
           ky=0.1, kz=0.2):
    g = None if gamma is None else (lambda t, f=piecewise_constant(gamma, 1.0): scale * f(t))
    return control_family(2, c1, c2, scale * Q * np.eye(2), scale * r, scale * H * np.eye(2),
                          scale * np.asarray(h1), ky, kz, gamma=g, U=U)


@pytest.fixture(scope="module")
def small():
    g = build_time_grid(1.0, 16)
    return g, sample_brownian(g, 400, 3)


# ---------------------------------------------------------------- spike control

@pytest.mark.exact
def test_spike_zero_width_keeps_reference():
    g = build_time_grid(1.0, 8)
    ub = np.linspace(-1, 1, 8)[:, None]
    assert np.all(spike_control(ub, SpikeSpec(0.25, 0.0, 5.0), g)[0] == ub)


@pytest.mark.exact
def test_spike_with_reference_value_keeps_reference():
    g = build_time_grid(1.0, 8)
    assert np.all(spike_control(0.7, SpikeSpec(0.25, 0.5, 0.7), g) == 0.7)


@pytest.mark.exact
def test_spike_outside_window_is_reference():
    g = build_time_grid(1.0, 8)
    ub = np.arange(8.0)[:, None]
    u = spike_control(ub, SpikeSpec(0.25, 0.25, -9.0), g)[0, :, 0]
    assert u.tolist() == [0.0, 1.0, -9.0, -9.0, 4.0, 5.0, 6.0, 7.0]


def test_spike_rejects_off_grid_window():
    with pytest.raises(InvalidArgumentError):
        spike_control(0.0, SpikeSpec(0.3, 0.25, 1.0), build_time_grid(1.0, 8))


# ---------------------------------------------------------------- variations

@pytest.mark.exact
def test_null_perturbation(small):
    g, e = small
    c = family()
    xb = solve_see(SYS, c, 0.4, e, np.array([0.5, 0.25]))
    vb = solve_variational(SYS, c, xb, 0.4, SpikeSpec(0.25, 0.25, 0.4), e)
    assert np.all(vb.x1.values == 0.0) and np.all(vb.x2.values == 0.0)
    assert np.all(vb.remainder.values == 0.0)


@pytest.mark.exact
def test_linear_coefficients_first_variation_is_exact(small):
    g, e = small
    c = family(c1=0.0)                       # a = 0, b = 0.3 u e1: linear, da = 0
    xb = solve_see(SYS, c, 0.0, e, np.array([0.5, 0.25]))
    vb = solve_variational(SYS, c, xb, 0.0, SpikeSpec(0.25, 0.25, 1.0), e)
    assert np.all(vb.x2.values == 0.0)
    diff = vb.xrho.values - vb.xbar.values
    assert np.abs(diff - vb.x1.values).max() <= 1e-14 * max(1.0, np.abs(diff).max())
    assert np.abs(diff).max() > 1e-3


# ---------------------------------------------------------------- cost expansion

@pytest.fixture(scope="module")
def adj_small(small):
    g, e = small
    c = family()
    xb = solve_see(SYS, c, 0.0, e, np.array([0.5, 0.25]))
    return c, compute_adjoints(SYS, c, xb, 0.0, e, ENG)


@pytest.mark.exact
def test_hat_zero_width(small, adj_small):
    g, e = small
    c, adj = adj_small
    yh = solve_hat_bsde(c, adj, SpikeSpec(0.25, 0.0, 1.0), e, ENG)
    assert np.all(yh.y == 0.0) and np.all(yh.z == 0.0)


@pytest.mark.exact
def test_hat_reference_value(small, adj_small):
    g, e = small
    c, adj = adj_small
    yh = solve_hat_bsde(c, adj, SpikeSpec(0.25, 0.25, 0.0), e, ENG)
    assert np.all(yh.y == 0.0)


@pytest.mark.exact
def test_duality_zero_width(small, adj_small):
    g, e = small
    c, adj = adj_small
    assert duality_value(c, adj, SpikeSpec(0.25, 0.0, 1.0), e) == (0.0, 0.0)


@pytest.mark.exact
def test_duality_homogeneous_in_drift_increment(small):
    # r = 0, gamma = 0, c2 = 0: the bracket is <p, da>, linear in c1; ubar = 0 keeps
    # the state and adjoints unchanged when c1 doubles.
    g, e = small
    vals = []
    for c1 in (0.5, 1.0):
        c = family(c1=c1, c2=0.0, r=0.0)
        xb = solve_see(SYS, c, 0.0, e, np.array([0.5, 0.25]))
        adj = compute_adjoints(SYS, c, xb, 0.0, e, ENG)
        vals.append(duality_value(c, adj, SpikeSpec(0.25, 0.25, 1.0), e)[0])
    assert vals[1] == pytest.approx(2 * vals[0], rel=1e-12)
    assert vals[0] != 0.0


# ---------------------------------------------------------------- Hamiltonian

def _ham_oracle(t, x, y, z, v, p, q, c1, c2, Q, r, g, ky, kz, b_ref=None):
    a = np.array([c1 * v, 0.0])
    b = np.array([c2 * v, 0.0])
    shift = 0.0 if b_ref is None else p @ (b - b_ref)
    k = x @ Q @ x + r * v * v + g * v + ky * y + kz * (z + shift)
    return p @ a + q @ b + k


@pytest.mark.exact
def test_hamiltonian_zero_adjoints_is_running_cost():
    c = family(gamma=[1.0, -1.0, 1.0])
    x = np.array([[0.3, -0.2]])
    H = hamiltonian(0.5, x, 0.1, -0.4, 0.7, np.zeros(2), np.zeros(2), c)
    k = c.k(0.5, x, np.array([0.1]), np.array([-0.4]), np.array([[0.7]]))
    assert H[0] == k[0]


@pytest.mark.exact
def test_hamiltonian_no_shift_when_diffusion_unchanged():
    c = family()
    x = np.array([[0.3, -0.2]])
    p, q = np.array([0.4, -1.0]), np.array([0.2, 0.5])
    b_ref = c.b(0.0, x, np.array([[0.7]]))[0]
    with_ref = hamiltonian(0.0, x, 0.1, -0.4, 0.7, p, q, c, b_ref=b_ref)
    without = hamiltonian(0.0, x, 0.1, -0.4, 0.7, p, q, c)
    assert with_ref[0] == without[0]


@pytest.mark.parametrize("v", [-1.0, 0.0, 0.35, 2.0])
def test_hamiltonian_matches_independent_formula(v):
    c = family(gamma=[1.0, -1.0, 1.0])
    x = np.array([0.3, -0.2])
    p, q = np.array([0.4, -1.0]), np.array([0.2, 0.5])
    b_ref = np.array([0.3 * 0.1, 0.0])
    H = hamiltonian(0.5, x[None], 0.1, -0.4, v, p, q, c, b_ref=b_ref)[0]
    ref = _ham_oracle(0.5, x, 0.1, -0.4, v, p, q, 0.5, 0.3, 0.5 * np.eye(2), 0.1, -1.0, 0.1, 0.2,
                      b_ref)
    assert H == pytest.approx(ref, rel=1e-14, abs=1e-15)


# ---------------------------------------------------------------- verdict and oracle

@pytest.mark.exact
def test_degenerate_problem_passes(small):
    g, e = small
    c = family(c1=0.0, c2=0.0, r=0.0, Q=0.0, H=0.0, h1=(0.0, 0.0), ky=0.0, kz=0.0)
    xb = solve_see(SYS, c, 0.0, e, np.array([0.5, 0.25]))
    adj = compute_adjoints(SYS, c, xb, 0.0, e, ENG)
    vd = smp_verdict(c, adj, [-1.0, 0.0, 1.0], n_sub=64)
    assert np.all(vd.values == 0.0)
    assert vd.verdict == "pass" and vd.fraction_ok == 1.0


def test_empty_lattice_rejected(adj_small):
    c, adj = adj_small
    with pytest.raises(InvalidArgumentError):
        smp_verdict(c, adj, [])


@pytest.mark.exact
def test_tie_break_returns_first(small):
    g, e = small
    c = family(c1=0.0, c2=0.0, r=0.0)
    u, table = brute_force_optimal(SYS, c, [-1.0, 1.0], 2, e, np.array([0.5, 0.25]), ENG)
    assert len({J for _, J in table}) == 1
    assert np.all(u == -1.0)
    assert [idx for idx, _ in table] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_enumeration_cap():
    g = build_time_grid(1.0, 4)
    with pytest.raises(ConfigurationError):
        brute_force_optimal(SYS, family(), [-1.0, 1.0], 13, sample_brownian(g, 2, 1),
                            np.zeros(2), ENG)


def test_interval_control_counts():
    u = interval_control([1.0, -1.0, 1.0], 10)
    assert u[:, 0].tolist() == [1.0] * 4 + [-1.0] * 3 + [1.0] * 3


def test_brute_force_matches_deterministic_quadrature():
    # B = 0 and c2 = 0 make the state deterministic; with kappa_y = kappa_z = 0
    # the cost is h(x_N) + sum_i k(t_i, x_i, u_i) dt.
    sysm = GalerkinSystem(np.array([[-1.0, 0.3], [0.2, -0.6]]), np.zeros((2, 2)))
    c = family(c2=0.0, ky=0.0, kz=0.0, gamma=[1.0, -1.0, 1.0])
    g = build_time_grid(1.0, 12)
    e = sample_brownian(g, 50, 1)
    x0 = np.array([0.5, 0.25])
    lat = [-1.0, 1.0]
    _, table = brute_force_optimal(sysm, c, lat, 3, e, x0, ENG)
    A = np.array([[-1.0, 0.3], [0.2, -0.6]])
    minv = np.linalg.inv(np.eye(2) - g.dt * A)
    gam = piecewise_constant([1.0, -1.0, 1.0], 1.0)
    for idx, J in table:
        u = interval_control([lat[j] for j in idx], 12)[:, 0]
        x, cost = x0.copy(), 0.0
        for i in range(12):
            cost += g.dt * (x @ (0.5 * np.eye(2)) @ x + 0.1 * u[i] ** 2 + gam(g.node(i)) * u[i])
            x = minv @ (x + g.dt * np.array([0.5 * u[i], 0.0]))
        cost += x @ x + np.array([0.2, 0.1]) @ x
        assert J == pytest.approx(cost, rel=1e-12, abs=1e-14)


def test_bang_bang_optimum_tracks_negative_gamma():
    g = build_time_grid(1.0, 24)
    e = sample_brownian(g, 500, 11)
    u, _ = brute_force_optimal(SYS, family(gamma=[1.0, -1.0, 1.0]), [-1.0, 1.0], 3, e,
                               np.array([0.5, 0.25]), ENG)
    assert [u[0, 0], u[8, 0], u[16, 0]] == [-1.0, 1.0, -1.0]


def test_argmin_invariant_under_cost_scaling():
    g = build_time_grid(1.0, 24)
    e = sample_brownian(g, 300, 4)
    x0 = np.array([0.5, 0.25])
    u1, t1 = brute_force_optimal(SYS, family(gamma=[0.3, -0.2, 0.1]), [-1.0, 0.0, 1.0], 2, e, x0, ENG)
    u3, t3 = brute_force_optimal(SYS, family(gamma=[0.3, -0.2, 0.1], scale=3.0), [-1.0, 0.0, 1.0],
                                 2, e, x0, ENG)
    assert np.array_equal(u1, u3)
    np.testing.assert_allclose([J for _, J in t3], [3 * J for _, J in t1], rtol=1e-9)
