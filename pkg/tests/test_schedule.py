import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gramnoise import schedule as sch


def test_sigma_endpoints_and_midpoint():
    assert sch.sigma(0) == 0.0
    assert sch.sigma(1) == 1.0
    assert sch.sigma(0.5) == pytest.approx(0.5, abs=1e-15)


def test_alpha_values():
    assert sch.alpha(0) == 1.0
    assert sch.alpha(1) == 0.0
    assert sch.alpha(1, clamp=True) == sch.ALPHA_MIN
    assert sch.alpha(0.5) == pytest.approx(math.sqrt(0.75), abs=1e-12)
    assert sch.alpha(0.5) == pytest.approx(0.8660254, abs=1e-7)


def test_alpha_ratio_examples():
    assert sch.alpha_ratio(0.3, 0.3) == 1.0
    assert sch.alpha_ratio(0.5, 0) == pytest.approx(0.8660254, abs=1e-7)
    # oracle: evaluate the schedule directly
    s_t, s_s = (1 - math.cos(math.pi * 0.5)) / 2, (1 - math.cos(math.pi * 0.25)) / 2
    expected = math.sqrt(1 - s_t**2) / math.sqrt(1 - s_s**2)
    assert sch.alpha_ratio(0.5, 0.25) == pytest.approx(expected, abs=1e-14)
    assert sch.alpha_ratio(0.5, 0.25) == pytest.approx(0.87547, abs=1e-5)


def test_sigma_cond_sq_examples():
    assert sch.sigma_cond_sq(0.4, 0.4) == 0.0
    assert sch.sigma_cond_sq(0.5, 0) == pytest.approx(0.25, abs=1e-15)
    assert sch.sigma_cond_sq(0.5, 0.25) == pytest.approx(0.25 - 0.8754641542540149**2 * 0.14644660940672627**2, abs=1e-14)
    assert sch.sigma_cond_sq(0.5, 0.25) == pytest.approx(0.23356, abs=1e-5)


@pytest.mark.parametrize("bad", [-0.01, 1.01, float("nan")])
def test_out_of_range_time_rejected(bad):
    with pytest.raises(ValueError):
        sch.DiffusionTime(bad)
    with pytest.raises(ValueError):
        sch.sigma(bad)


def test_ordering_errors():
    with pytest.raises(ValueError):
        sch.alpha_ratio(0.2, 0.3)
    with pytest.raises(ValueError):
        sch.sigma_cond_sq(0.2, 0.3)
    with pytest.raises(ValueError):
        sch.reverse_coefficients(0.3, 0.3)
    with pytest.raises(ValueError):
        sch.reverse_coefficients(0.0, 0.0)


def test_reverse_coefficients_from_zero():
    c = sch.reverse_coefficients(0.5, 0.0)
    assert c.f == pytest.approx(1.154701, abs=1e-6)
    assert c.g == pytest.approx(0.57735, abs=1e-5)
    assert c.h == 0.0


def test_reverse_coefficients_degenerate_limit():
    c = sch.reverse_coefficients(0.5, 0.5 - 1e-9)
    assert c.f == pytest.approx(1.0, abs=1e-8)
    assert c.g == pytest.approx(0.0, abs=1e-7)
    assert c.h == pytest.approx(0.0, abs=1e-4)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_step_coefficient_signs(a, b):
    s, tau = min(a, b), max(a, b)
    if tau - s < 1e-9:
        return
    c = sch.reverse_coefficients(tau, s)
    assert c.f >= 1.0 and c.g >= 0.0 and c.h >= 0.0


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_composition_property(a, b, c):
    r, s, tau = sorted([a, b, c])
    assert sch.alpha_ratio(tau, s) * sch.alpha_ratio(s, r) == pytest.approx(sch.alpha_ratio(tau, r), abs=1e-12)
    marginal = sch.alpha_ratio(tau, s) ** 2 * sch.sigma(s) ** 2 + sch.sigma_cond_sq(tau, s)
    assert marginal == pytest.approx(sch.sigma(tau) ** 2, abs=1e-12)


def test_sigma_strictly_increasing():
    grid = np.linspace(0, 1, 2001)
    sig = np.array([sch.sigma(t) for t in grid])
    assert np.all(np.diff(sig) > 0)


def test_step_grid():
    assert sch.step_grid(4) == [(1.0, 0.75), (0.75, 0.5), (0.5, 0.25), (0.25, 0.0)]
    assert sch.step_grid(4, start_index=2) == [(0.5, 0.25), (0.25, 0.0)]


def test_variance_form_of_h_disagrees_with_posterior_std():
    """The ancestral noise multiplier is a standard deviation, not a variance."""
    tau, s = 0.5, 0.25
    as_variance = sch.sigma_cond_sq(tau, s) * sch.sigma(s) ** 2 / sch.sigma(tau) ** 2
    assert sch.reverse_coefficients(tau, s).h == pytest.approx(math.sqrt(as_variance))
    assert abs(as_variance - sch.reverse_coefficients(tau, s).h) > 0.1
