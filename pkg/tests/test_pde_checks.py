import math

import numpy as np
import pytest
from scipy.stats import norm

from free_boundary_lab.core.exceptions import DomainError
from free_boundary_lab.core.pde_checks import (
    binomial_american_value,
    complementarity_check,
    dotv_bound_check,
    hit_fraction,
    hitting_prob_check,
    lipschitz_ratio_check,
    mc_udot_check,
    pde_operator_residual,
    smooth_fit_check,
)


def _european_put(S, K, r, delta, sigma, T):
    d1 = (math.log(S / K) + (r - delta + 0.5 * sigma**2) * T) / (sigma * math.sqrt(T))
    d2 = d1 - sigma * math.sqrt(T)
    return K * math.exp(-r * T) * norm.cdf(-d2) - S * math.exp(-delta * T) * norm.cdf(-d1)


def test_binomial_tree_bounds_and_convergence():
    american = binomial_american_value("put", 1.0, 1.0, 0.06, 0.02, 0.4, 1.0, 2000)
    assert american >= _european_put(1.0, 1.0, 0.06, 0.02, 0.4, 1.0)
    assert american <= 1.0
    finer = binomial_american_value("put", 1.0, 1.0, 0.06, 0.02, 0.4, 1.0, 4000)
    assert abs(american - finer) < 5e-4


def test_binomial_tree_deep_in_the_money_put_is_intrinsic():
    assert binomial_american_value("put", 0.3, 1.0, 0.06, 0.02, 0.4, 1.0, 500) == pytest.approx(0.7)


def test_binomial_tree_rejects_arbitrage():
    with pytest.raises(DomainError):
        binomial_american_value("put", 1.0, 1.0, 5.0, 0.0, 0.01, 1.0, 10)


def test_complementarity_has_no_misclassified_nodes(put_surface):
    check = complementarity_check(put_surface)
    assert check.passed
    assert check.n_active > 0 and check.n_contact > 0


def test_operator_residual_is_small_deep_in_continuation(put_surface):
    grid = put_surface.grid
    residual = pde_operator_residual(put_surface)
    i = int(np.searchsorted(grid.t_nodes, 0.4))
    j = int(np.searchsorted(grid.x_nodes, 1.2))
    assert abs(residual[i, j]) < 1e-2 * put_surface.scale


def test_dotv_constant_is_finite(put_surface):
    check = dotv_bound_check(put_surface, put_surface.spec.rect_T1)
    assert math.isfinite(check.value) and check.value > 0.0
    assert check.refined_value is None and check.passed


def test_lipschitz_check(put_surface):
    dotv = dotv_bound_check(put_surface, 0.8)
    check = lipschitz_ratio_check(put_surface, 0.64, dotv_constant=dotv.value)
    assert check.monotone
    assert math.isfinite(check.max_slope)
    assert check.apriori_bound is not None and check.max_slope <= check.apriori_bound


def test_lipschitz_check_preconditions(put_surface, inhomogeneous_surface):
    with pytest.raises(DomainError):
        lipschitz_ratio_check(put_surface, 0.8)
    with pytest.raises(DomainError):
        lipschitz_ratio_check(inhomogeneous_surface, 0.5)
    with pytest.raises(DomainError):
        dotv_bound_check(inhomogeneous_surface, 0.8)


def test_smooth_fit_diagnostics_are_finite(put_surface):
    check = smooth_fit_check(put_surface, 0.64)
    assert math.isfinite(check.ux_over_dx)
    assert math.isfinite(check.curvature_rel_err_median)


def test_udot_check_rejects_points_in_the_stopping_region(put_spec, put_surface):
    with pytest.raises(DomainError):
        mc_udot_check(put_spec, put_surface, 0.2, 0.56, 10, seed=1)


def test_udot_check_is_deterministic(put_spec, put_surface):
    a = mc_udot_check(put_spec, put_surface, 0.7, 1.1, 200, seed=3, batch_size=64)
    b = mc_udot_check(put_spec, put_surface, 0.7, 1.1, 200, seed=3, batch_size=64, workers=3)
    assert a.mc_value == b.mc_value and a.std_err == b.std_err
    assert a.escape_fraction == 0.0


def test_hit_fraction_interpolates_against_a_moving_level():
    frac = hit_fraction(np.array([1.0, 1.0, 1.0]), np.array([0.0, 0.5, 0.9]), 0.5, np.array([0.5, 0.5, 0.95]))
    assert frac == pytest.approx([0.5, 1.0, 0.5 / 0.55])
    assert hit_fraction(np.array([1.2]), np.array([1.4]), 1.3, 1.3) == pytest.approx([0.5])


def test_udot_check_with_a_running_source_is_deterministic(inhomogeneous_spec, inhomogeneous_surface):
    a = mc_udot_check(inhomogeneous_spec, inhomogeneous_surface, 0.7, 1.0, 200, seed=4, batch_size=64)
    b = mc_udot_check(inhomogeneous_spec, inhomogeneous_surface, 0.7, 1.0, 200, seed=4, batch_size=64, workers=2)
    assert math.isfinite(a.mc_value) and a.std_err > 0.0
    assert a.mc_value == b.mc_value


def test_hitting_probability_edges(put_spec, put_surface):
    below = hitting_prob_check(put_spec, put_surface, 0.2, 0.56, 10, seed=1)
    assert below.mc_prob == 0.0 and below.scale_prob == 0.0
    above = hitting_prob_check(put_spec, put_surface, 0.2, 1.3, 10, seed=1)
    assert above.mc_prob == 1.0 and above.scale_prob == 1.0


def test_hitting_probability_needs_stop_below(call_spec, call_surface):
    with pytest.raises(DomainError):
        hitting_prob_check(call_spec, call_surface, 0.2, 2.0, 10, seed=1)


@pytest.mark.slow
def test_udot_representation_agrees_with_the_grid(put_spec, put_surface, put_surface_refined):
    t = 0.32
    b = float(put_surface.boundary_at(t))
    x = b + 0.5 * (1.3 - b)
    check = mc_udot_check(put_spec, put_surface, t, x, 20000, seed=5)
    budget = abs(float(put_surface.interp("u_dot", t, x)) - float(put_surface_refined.interp("u_dot", t, x)))
    assert abs(check.mc_value - check.fd_value) <= 3.0 * check.std_err + budget


@pytest.mark.slow
def test_hitting_probability_matches_the_scale_function(put_spec, put_surface):
    t = 0.16
    b = float(put_surface.boundary_at(t))
    check = hitting_prob_check(put_spec, put_surface, t, b + 0.5 * (1.3 - b), 20000, seed=9)
    bias = 2 * 0.5826 * 0.4 * b * math.sqrt(check.dt_mc) / (1.3 - b)
    assert abs(check.mc_prob - check.scale_prob) <= 3.0 * check.std_err + bias


@pytest.mark.slow
def test_bounds_are_stable_under_refinement(put_surface, put_surface_refined):
    dotv = dotv_bound_check(put_surface, 0.8, put_surface_refined)
    assert dotv.growth is not None and math.isfinite(dotv.refined_value)
    lip = lipschitz_ratio_check(put_surface, 0.64, put_surface_refined, dotv_constant=dotv.value)
    assert lip.monotone and math.isfinite(lip.refined_max_slope)
