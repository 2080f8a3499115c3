import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seesmp.errors import DroppedDataWarning, InsufficientDataError
from seesmp.orders import fit_order, order_report

RHO = [0.5 / 2 ** j for j in range(5)]


@pytest.mark.exact
def test_exact_power_law():
    slope, r2 = fit_order(RHO, [r ** 2 for r in RHO])
    assert slope == pytest.approx(2.0, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


@pytest.mark.exact
def test_constant_errors_zero_slope():
    slope, _ = fit_order(RHO, [0.3] * 5)
    assert slope == pytest.approx(0.0, abs=1e-12)


def test_nonpositive_pairs_dropped_with_warning():
    with pytest.warns(DroppedDataWarning):
        slope, _ = fit_order(RHO, [RHO[0], 0.0, RHO[2], -1.0, RHO[4]])
    assert slope == pytest.approx(1.0, abs=1e-12)


def test_too_few_pairs():
    with pytest.raises(InsufficientDataError), pytest.warns(DroppedDataWarning):
        fit_order(RHO, [1.0, 0.0, 0.0, 0.0, 1.0])


@pytest.mark.exact
def test_all_zero_errors_exact_zero_verdict():
    rep = order_report(RHO, [0.0] * 5, 1.0, "O")
    assert rep.verdict == "exact-zero" and rep.passed


def test_little_o_claim():
    assert order_report(RHO, [r ** 1.5 for r in RHO], 1.0, "o").verdict == "pass"
    assert order_report(RHO, [r ** 1.1 for r in RHO], 1.0, "o").verdict == "fail"


def test_big_o_claim():
    assert order_report(RHO, [r ** 1.2 for r in RHO], 1.0, "O").verdict == "pass"
    assert order_report(RHO, [r ** 1.3 for r in RHO], 1.0, "O").verdict == "fail"


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_noisy_power_law(seed):
    noise = np.random.default_rng(seed).uniform(-1, 1, 5)
    err = [r ** 1.5 * (1 + 0.05 * z) for r, z in zip(RHO, noise)]
    slope, _ = fit_order(RHO, err)
    assert 1.35 <= slope <= 1.65


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0.1, 4.0), c=st.floats(1e-3, 1e3))
def test_scale_invariance(p, c):
    slope, r2 = fit_order(RHO, [c * r ** p for r in RHO])
    assert slope == pytest.approx(p, abs=1e-9) and r2 == pytest.approx(1.0, abs=1e-9)
