import math

import numpy as np
import pytest

from free_boundary_lab.core.bessel_suite import (
    KS_COEFFICIENT,
    SuiteResult,
    _merge_bins,
    conditional_J_law_check,
    inverse_moment_checks,
    inverse_moment_exact,
    linear_phi,
    marginal_checks,
    run_bessel_suite,
    sigma_beta_check,
    theta_ordering_check,
)
from free_boundary_lab.core.exceptions import DomainError


def test_inverse_moments_by_quadrature():
    assert inverse_moment_exact(1.0) == pytest.approx(math.sqrt(2.0 / math.pi), rel=1e-8)
    assert inverse_moment_exact(2.0) == pytest.approx(1.0, rel=1e-8)
    assert inverse_moment_exact(2.0, t=4.0) == pytest.approx(0.25, rel=1e-8)
    assert inverse_moment_exact(3.0) == math.inf


def test_suite_result_verdicts():
    assert SuiteResult("a", 0.1, 0.2, True).verdict == "PASS"
    assert SuiteResult("a", 0.3, 0.2, False).verdict == "FAIL"
    assert SuiteResult("a", 0.3, 0.2, False, asserted=False).verdict == "INFO"


def test_merge_bins_pools_sparse_bins():
    groups = _merge_bins(np.array([600, 100, 450, 700, 10]), 500)
    assert groups == [(0, 1), (1, 3), (3, 5)]
    assert _merge_bins(np.array([10, 20]), 500) == [(0, 2)]


def test_linear_phi():
    phi = linear_phi(-0.6, -0.5)
    assert np.allclose(phi(np.array([0.0, 1.0])), [-0.6, -1.1])


def test_marginal_checks_names_and_statistics():
    n = 20000
    results = marginal_checks(n, seed=3)
    names = [r.name for r in results]
    assert names == ["ks_rho_t=0.25", "ks_minus_W_t=0.25", "ks_rho_t=1", "ks_minus_W_t=1", "mean_rho_1"]
    for r in results[:4]:
        assert r.threshold == pytest.approx(KS_COEFFICIENT / math.sqrt(n))
        assert r.statistic < 2.0 * r.threshold
    assert results[-1].statistic < 2.0 * results[-1].threshold


def test_conditional_law_of_the_future_infimum():
    result = conditional_J_law_check(20000, 1.0, 4, seed=4)
    assert result.statistic > 1e-6
    with pytest.raises(DomainError):
        conditional_J_law_check(100, 0.0, 4, seed=4)


def test_inverse_moment_rows():
    results = inverse_moment_checks(20000, seed=5, doublings=2)
    assert [r.name for r in results] == ["inverse_moment_p=1", "inverse_moment_p=2", "inverse_moment_p=3_doubling"]
    assert results[0].statistic <= 2.0 * results[0].threshold
    assert results[-1].verdict == "INFO"


def test_pathwise_orderings_hold_exactly():
    assert sigma_beta_check(200, seed=6, n_steps=400).passed
    assert theta_ordering_check(300, seed=6, n_steps=200).passed


@pytest.mark.slow
def test_full_suite_passes():
    results = run_bessel_suite(20000, seed=0, workers=2, quick=True)
    failed = [r.name for r in results if r.verdict == "FAIL"]
    assert len(failed) <= 1, failed
