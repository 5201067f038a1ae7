import math

import numpy as np
import pytest

from free_boundary_lab.core.bessel import (
    BoundaryCurveY,
    bessel_sde_oracle,
    check_capped_fraction,
    conditional_J_cdf,
    cumulative_log_weight,
    discount_D,
    hitting_time_theta,
    hitting_time_theta_h,
    modulus_oracle,
    sample_pitman_path,
    sigma_beta_violations,
    tau_pm_h,
    value_at_index,
    weight_L,
)
from free_boundary_lab.core.exceptions import DomainError, NumericalFailureError
from free_boundary_lab.services.random_streams import substream


@pytest.fixture(scope="module")
def paths():
    return sample_pitman_path(400, 1e-3, substream(0, "test-bessel", 0), n_paths=2000, seed=0, substream=0)


def _flat_curve(level, T1=1.0):
    t = np.linspace(0.0, T1, 11)
    return BoundaryCurveY.from_arrays(t, np.full_like(t, level))


def test_pitman_triple_invariants(paths):
    assert paths.n_paths == 2000 and paths.n_steps == 400
    assert paths.horizon == pytest.approx(0.4)
    assert np.all(paths.Wbar >= paths.W - 1e-15)
    assert np.all(np.diff(paths.Wbar, axis=1) >= 0.0)
    assert np.all(paths.rho >= -1e-15)
    assert np.allclose(paths.rho, 2.0 * paths.Wbar - paths.W)
    assert np.allclose(paths.xi(0.1), 0.1 - paths.W)


def test_bridge_maximum_dominates_the_discrete_maximum():
    rng_a, rng_b = substream(1, "bridge", 0), substream(1, "bridge", 0)
    exact = sample_pitman_path(50, 0.01, rng_a, 500, bridge_max=True)
    discrete = sample_pitman_path(50, 0.01, rng_b, 500, bridge_max=False)
    assert np.array_equal(exact.W, discrete.W)
    assert np.all(exact.Wbar >= discrete.Wbar - 1e-15)


def test_rho_marginal_mean(paths):
    # E rho_t = 2 sqrt(2 t / pi) for the 3-D Bessel process from 0
    t = paths.horizon
    mean = float(np.mean(paths.rho[:, -1]))
    se = float(np.std(paths.rho[:, -1]) / math.sqrt(paths.n_paths))
    assert abs(mean - 2.0 * math.sqrt(2.0 * t / math.pi)) < 4.0 * se


def test_coarsen_keeps_the_observed_values(paths):
    coarse = paths.coarsen(4)
    assert coarse.n_steps == 100
    assert coarse.dt_path == pytest.approx(4e-3)
    assert np.array_equal(coarse.W, paths.W[:, ::4])
    with pytest.raises(DomainError):
        paths.coarsen(3)


def test_value_at_index_interpolates():
    values = np.array([[0.0, 1.0, 2.0], [10.0, 20.0, 30.0]])
    assert np.allclose(value_at_index(values, np.array([0.5, 1.5])), [0.5, 25.0])
    assert np.allclose(value_at_index(values, np.array([5.0, -1.0])), [2.0, 10.0])


def test_theta_hits_the_upper_edge(paths):
    curve = _flat_curve(0.0)
    result = hitting_time_theta(paths, curve, t=0.6, T1=1.0, y2=1.2)
    crossed = result.crossed
    assert crossed.any() and not crossed.all()
    assert np.allclose(result.rho_theta[crossed], 1.2)
    assert np.all(result.theta <= 0.4 + 1e-12)
    assert np.allclose(result.theta[~crossed], 0.4)


def test_theta_requires_t_below_T1(paths):
    with pytest.raises(DomainError):
        hitting_time_theta(paths, _flat_curve(0.0), t=1.0, T1=1.0, y2=0.3)


def test_theta_h_is_uncapped_and_rejects_negative_h(paths):
    theta_h, index = hitting_time_theta_h(paths, _flat_curve(0.0), 0.6, 1.0, 0.3, 0.05)
    assert np.any(np.isinf(theta_h)) or np.all(theta_h <= paths.horizon)
    assert np.all(theta_h[np.isfinite(theta_h)] >= 0.0)
    with pytest.raises(DomainError):
        hitting_time_theta_h(paths, _flat_curve(0.0), 0.6, 1.0, 0.3, -0.1)


def test_tau_pair_ordering(paths):
    pair = tau_pm_h(paths, lambda s: -0.3 + 0.5 * s, 0.05)
    both = np.isfinite(pair.tau_minus) & np.isfinite(pair.tau_plus)
    assert both.any()
    assert np.all(pair.tau_minus[both] <= pair.tau_plus[both])
    with pytest.raises(DomainError):
        tau_pm_h(paths, lambda s: 0.0 * s, 0.05)


def test_sigma_beta_ordering_has_no_violations(paths):
    violations, tested = sigma_beta_violations(paths, lambda s: -0.3 + 0.5 * s, 0.05, 0.5)
    assert tested > 0
    assert violations == 0


def test_weight_is_one_without_drift(paths):
    curve = _flat_curve(0.0)
    result = weight_L(paths, curve, lambda t, y: 0.0 * y, 0.0, 0.3)
    assert np.allclose(result.value, 1.0)
    assert not result.capped.any()


def test_constant_drift_weight_is_exact(paths):
    # gamma = k: log L = k rho_s - k^2 s / 2
    k = 0.7
    curve = _flat_curve(0.0)
    exponent, _ = cumulative_log_weight(paths, curve, lambda t, y: k + 0.0 * y, 0.0, 100)
    expected = k * paths.rho[:, 100] - 0.5 * k**2 * 100 * paths.dt_path
    assert np.allclose(exponent[:, 100], expected, atol=1e-10)


def test_constant_discount(paths):
    d = discount_D(paths, _flat_curve(0.0), lambda t, y: 0.05 + 0.0 * y, 0.0, 0.2)
    assert np.allclose(d, math.exp(-0.01))


def test_capped_fraction_limit():
    assert check_capped_fraction(np.zeros(100, dtype=bool), "x") == 0.0
    flags = np.zeros(100, dtype=bool)
    flags[0] = True
    with pytest.raises(NumericalFailureError) as info:
        check_capped_fraction(flags, "lambda")
    assert info.value.stage == "lambda"


def test_conditional_J_cdf():
    assert conditional_J_cdf(0.25, 1.0) == pytest.approx(0.25)
    assert conditional_J_cdf(2.0, 1.0) == 1.0
    assert conditional_J_cdf(-1.0, 1.0) == 0.0


def test_modulus_oracle_mean():
    samples = modulus_oracle(20000, 1.0, substream(2, "oracle", 0))
    se = float(np.std(samples)) / math.sqrt(samples.size)
    assert abs(float(np.mean(samples)) - 2.0 * math.sqrt(2.0 / math.pi)) < 4.0 * se


def test_euler_bessel_sde_agrees_with_the_modulus_oracle():
    euler = bessel_sde_oracle(20000, 1.0, 200, substream(3, "oracle", 0))
    exact = modulus_oracle(20000, 1.0, substream(3, "oracle", 1))
    se = math.hypot(np.std(euler), np.std(exact)) / math.sqrt(20000)
    assert np.all(euler >= 0.0)
    assert abs(float(np.mean(euler)) - float(np.mean(exact))) < 4.0 * se + 0.02
