import numpy as np
import pytest

from seesmp.bsde import RegressionEngine
from seesmp.bsie import bsie_picard
from seesmp.core import GalerkinSystem, SpikeSpec, build_time_grid, sample_brownian
from seesmp.ito import (compute_sigma, extract_Z, reconstruct_M, shift_diffusion_inhomogeneity,
                        shift_order_sweep, spiked_state)

S1 = GalerkinSystem(np.array([[-0.2]]), np.array([[0.4]]))


@pytest.fixture(scope="module")
def setup():
    g = build_time_grid(1.0, 32)
    e = sample_brownian(g, 2000, 7)
    P = bsie_picard(S1, np.eye(1), lambda t, P: -0.3 * P, 0.0, sample_brownian(g, 20000, 99))
    return g, e, P


@pytest.mark.exact
def test_null_spike_gives_zero_sigma(setup):
    g, e, P = setup
    b = compute_sigma(P, S1, 1.0, 0.0, SpikeSpec(0.5, 0.0), e, RegressionEngine(2),
                      f=lambda t, P: -0.3 * P)
    assert np.all(b.x.values == 0.0)
    assert np.all(b.sigma == 0.0)


@pytest.mark.exact
def test_zero_forcing_gives_zero_sigma_and_Z(setup):
    g, e, P = setup
    b = compute_sigma(P, S1, 0.0, 0.0, SpikeSpec(0.25, 0.25), e, RegressionEngine(2),
                      f=lambda t, P: -0.3 * P)
    assert np.all(b.sigma == 0.0)
    Z, val, _ = extract_Z(b)
    assert np.all(Z == 0.0) and val == 0.0


def test_sigma_vanishes_at_terminal_node(setup):
    g, e, P = setup
    b = compute_sigma(P, S1, 1.0, 0.0, SpikeSpec(0.25, 0.25), e, RegressionEngine(2),
                      f=lambda t, P: -0.3 * P)
    assert np.all(b.sigma[:, -1] == 0.0)


def test_reconstruction_matches(setup):
    g, e, P = setup
    b = compute_sigma(P, S1, 1.0, 0.0, SpikeSpec(0.25, 0.25), e, RegressionEngine(2),
                      f=lambda t, P: -0.3 * P)
    _, err = reconstruct_M(b, 0.0, e, RegressionEngine(2))
    assert err <= 5 * g.dt


@pytest.mark.exact
def test_shift_exact_for_zero_operators():
    g = build_time_grid(1.0, 32)
    e = sample_brownian(g, 100, 1)
    res = shift_diffusion_inhomogeneity(GalerkinSystem(np.zeros((2, 2)), np.zeros((2, 2))),
                                        [1.0, -0.5], SpikeSpec(0.25, 0.25), e)
    assert np.all(res.y.values == res.shifted.values)
    assert res.error == 0.0


@pytest.mark.exact
def test_shift_zero_before_window():
    g = build_time_grid(1.0, 32)
    e = sample_brownian(g, 50, 1)
    res = shift_diffusion_inhomogeneity(S1, 1.0, SpikeSpec(0.5, 0.25), e)
    assert np.all(res.shifted.values[:, :17] == 0.0)
    assert np.all(res.y.values[:, :17] == 0.0)


def test_shift_on_window_is_scaled_increment():
    g = build_time_grid(1.0, 32)
    e = sample_brownian(g, 50, 1)
    res = shift_diffusion_inhomogeneity(S1, 2.0, SpikeSpec(0.5, 0.25), e)
    w = e.w
    np.testing.assert_allclose(res.shifted.values[:, 16:25, 0], 2.0 * (w[:, 16:25] - w[:, [16]]),
                               rtol=0, atol=1e-14)


def test_shift_order_quick():
    g = build_time_grid(1.0, 128)
    e = sample_brownian(g, 4000, 3)
    _, rep = shift_order_sweep(GalerkinSystem(np.array([[-0.5]]), np.array([[0.5]])), 1.0, 0.25,
                               [0.5 / 2 ** j for j in range(4)], e)
    assert rep.verdict == "pass"


def test_spiked_state_linear_in_zeta():
    g = build_time_grid(1.0, 16)
    e = sample_brownian(g, 20, 1)
    a = spiked_state(S1, 1.0, SpikeSpec(0.25, 0.5), e).values
    b = spiked_state(S1, 3.0, SpikeSpec(0.25, 0.5), e).values
    np.testing.assert_allclose(b, 3 * a, rtol=1e-13, atol=0)
