import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seesmp.core import (CoefficientSet, GalerkinSystem, SpikeSpec, build_time_grid,
                         sample_brownian, validate_assumptions)
from seesmp.errors import InvalidArgumentError


@pytest.mark.exact
def test_grid_quarter_nodes():
    g = build_time_grid(1.0, 4)
    assert g.nodes.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]


@pytest.mark.exact
def test_grid_single_step():
    assert build_time_grid(1.0, 1).nodes.tolist() == [0.0, 1.0]


@pytest.mark.exact
def test_grid_dt_and_node():
    g = build_time_grid(0.5, 5)
    assert g.dt == 0.1
    assert g.node(3) == pytest.approx(0.3, abs=1e-15)


@pytest.mark.parametrize("T, n", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects_bad_input(T, n):
    with pytest.raises(InvalidArgumentError):
        build_time_grid(T, n)


@pytest.mark.exact
def test_brownian_same_seed_bitwise():
    g = build_time_grid(1.0, 32)
    a = sample_brownian(g, 50, 11).increments
    b = sample_brownian(g, 50, 11).increments
    assert a.tobytes() == b.tobytes()


@pytest.mark.exact
def test_brownian_next_seed_differs():
    g = build_time_grid(1.0, 32)
    assert np.any(sample_brownian(g, 50, 11).increments != sample_brownian(g, 50, 12).increments)


def test_brownian_counter_property():
    # Entry (p, i) depends on (seed, p, i) only: a larger draw extends a smaller one.
    g = build_time_grid(1.0, 32)
    small = sample_brownian(g, 10, 4).increments
    big = sample_brownian(g, 40, 4).increments
    assert small.tobytes() == big[:10].tobytes()


def test_brownian_moments():
    g = build_time_grid(1.0, 16)
    dw = sample_brownian(g, 20000, 1).increments
    assert abs(dw.mean()) < 4 * np.sqrt(g.dt / dw.size)
    assert dw.var() / g.dt == pytest.approx(1.0, abs=0.02)


def test_coarsen_sums_increments():
    e = sample_brownian(build_time_grid(1.0, 8), 3, 2)
    c = e.coarsen(4)
    assert c.grid.n_steps == 2
    np.testing.assert_allclose(c.w[:, -1], e.w[:, -1], rtol=0, atol=1e-15)


@pytest.mark.exact
def test_coercivity_passes_for_negative_identity():
    s = GalerkinSystem(-np.eye(3), np.zeros((3, 3)), delta=1.0, K=1.0)
    assert validate_assumptions(s, None)["coercivity"].passed


@pytest.mark.exact
def test_quasi_skew_fails_for_identity_noise():
    s = GalerkinSystem(-np.eye(2), np.eye(2), delta=0.0, K=0.5)
    chk = validate_assumptions(s, None)["quasi_skew"]
    assert not chk.passed
    assert chk.worst_value == pytest.approx(0.5)


def _square_drift_family():
    def z2(t, x, u):
        return np.zeros((len(x), 1, 1))

    return CoefficientSet(
        a=lambda t, x, u: x ** 2,
        b=lambda t, x, u: np.zeros_like(x),
        h=lambda x: np.zeros(len(x)),
        k=lambda t, x, y, z, u: np.zeros(len(x)),
        a_x=lambda t, x, u: (2 * x)[:, :, None],
        b_x=z2,
        a_xx=lambda t, x, u: np.full((len(x), 1, 1, 1), 2.0),
        b_xx=lambda t, x, u: np.zeros((len(x), 1, 1, 1)),
        h_x=lambda x: np.zeros_like(x),
        h_xx=lambda x: np.zeros((len(x), 1, 1)),
        k_x=lambda t, x, y, z, u: np.zeros_like(x),
        k_y=lambda t, x, y, z, u: np.zeros(len(x)),
        k_z=lambda t, x, y, z, u: np.zeros(len(x)),
        D2k=lambda t, x, y, z, u: np.zeros((len(x), 3, 3)),
        bound=10.0,
    )


@pytest.mark.exact
def test_gradient_check_exact_derivative():
    s = GalerkinSystem(-np.eye(1), np.zeros((1, 1)), K=0.0)
    rep = validate_assumptions(s, _square_drift_family(), n_probes=16, rtol=1e-4)
    assert rep["a_x"].passed and rep["a_x"].worst_value <= 1e-4


@pytest.mark.exact
def test_gradient_check_catches_wrong_derivative():
    c = dataclasses.replace(_square_drift_family(), a_x=lambda t, x, u: (3 * x)[:, :, None])
    rep = validate_assumptions(GalerkinSystem(-np.eye(1), np.zeros((1, 1))), c, n_probes=16)
    assert not rep["a_x"].passed


def test_spike_window_on_grid():
    g = build_time_grid(1.0, 8)
    assert SpikeSpec(0.25, 0.5).window(g) == (2, 6)
    assert SpikeSpec(0.25, 0.0).window(g) == (2, 2)
    with pytest.raises(InvalidArgumentError):
        SpikeSpec(0.3, 0.125).window(g)
    with pytest.raises(InvalidArgumentError):
        SpikeSpec(0.75, 0.5).window(g)


@settings(max_examples=30, deadline=None)
@given(T=st.floats(0.1, 10.0), n=st.integers(1, 200))
def test_grid_nodes_uniform(T, n):
    g = build_time_grid(T, n)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == T
    np.testing.assert_allclose(np.diff(g.nodes), g.dt, rtol=1e-12)
