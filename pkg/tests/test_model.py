import math

import numpy as np
import pytest

from free_boundary_lab.core.exceptions import DomainError
from free_boundary_lab.core.instances import american_put_spec
from free_boundary_lab.core.model import (
    LampertiMap,
    bigH_fn,
    derivative_consistency,
    gamma_fn,
    h_fn,
    scale_function,
)
from tests.conftest import PUT


def test_put_h_is_delta_x_minus_rK(put_spec):
    assert h_fn(put_spec, 0.3, 1.0) == pytest.approx(0.02 * 1.0 - 0.06 * 1.0, abs=1e-14)
    xs = np.linspace(0.55, 1.3, 7)
    assert np.allclose(h_fn(put_spec, 0.1, xs), 0.02 * xs - 0.06, atol=1e-14)


def test_h_outside_rectangle_raises(put_spec):
    with pytest.raises(DomainError):
        h_fn(put_spec, 0.3, 2.0)
    with pytest.raises(DomainError):
        h_fn(put_spec, 0.9, 1.0)


def test_bigH_vanishes_for_time_homogeneous_put(put_spec):
    assert bigH_fn(put_spec, 0.3, 1.0, 0.1, 0.2) == pytest.approx(0.0, abs=1e-15)


def test_bigH_time_inhomogeneous(inhomogeneous_spec):
    # h_dot = -r K, mu_t = r x, r_t = r
    expected = -0.05 + 0.05 * 1.0 * 0.2 - 0.05 * 0.1
    assert bigH_fn(inhomogeneous_spec, 0.3, 1.0, 0.1, 0.2) == pytest.approx(expected, abs=1e-12)


def test_lamperti_map_of_gbm_is_scaled_log(put_spec):
    lam = LampertiMap(put_spec.diffusion, 0.55, 1.3)
    assert lam.y1 == pytest.approx(0.0, abs=1e-12)
    assert lam.f(1.0) == pytest.approx(math.log(1.0 / 0.55) / 0.4, rel=1e-9)
    assert lam.f_inv(lam.f(0.9)) == pytest.approx(0.9, rel=1e-9)
    xs = np.linspace(0.6, 1.2, 11)
    assert np.allclose(lam.f_inv_array(lam.f_array(xs)), xs, rtol=1e-6)


def test_gamma_is_constant_for_gbm(put_spec):
    lam = LampertiMap(put_spec.diffusion, 0.55, 1.3)
    ys = np.linspace(lam.y1, lam.y2, 5)
    expected = (0.06 - 0.02) / 0.4 - 0.2
    assert np.allclose(gamma_fn(put_spec, lam, 0.2, ys), expected, atol=1e-6)


def test_scale_function_matches_closed_form(put_spec):
    # S'(x) = (x / x1)^(-2 (r - delta) / sigma^2) = (x / x1)^(-1/2)
    x1 = 0.55
    expected = math.sqrt(x1) * 2.0 * (math.sqrt(1.0) - math.sqrt(x1))
    assert scale_function(put_spec, 1.0) == pytest.approx(expected, rel=1e-8)
    assert scale_function(put_spec, x1) == pytest.approx(0.0, abs=1e-14)


def test_scale_function_needs_homogeneous_drift(inhomogeneous_spec):
    with pytest.raises(DomainError):
        scale_function(inhomogeneous_spec, 1.0)


def test_analytic_derivatives_are_consistent(put_spec, inhomogeneous_spec):
    for spec in (put_spec, inhomogeneous_spec):
        assert max(derivative_consistency(spec).values()) < 1e-6


def test_positive_h_is_rejected():
    with pytest.raises(DomainError):
        american_put_spec(**{**PUT, "delta": 0.3})


def test_rectangle_time_edge_must_precede_maturity():
    with pytest.raises(DomainError):
        american_put_spec(**{**PUT, "T1": 1.0})
