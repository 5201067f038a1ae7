"""
File: bessel_suite.py
Description: Statistical checks of the Pitman-coupled Bessel simulation: marginal laws, the
    conditional law of the future infimum, inverse moments, exponential-moment and first-passage
    bounds, pathwise orderings of the hitting times and weight self-convergence.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from loguru import logger
from scipy import stats
from scipy.integrate import quad

from free_boundary_lab.core.bessel import (
    BoundaryCurveY,
    PitmanPath,
    cumulative_log_weight,
    hitting_time_theta,
    hitting_time_theta_h,
    sample_pitman_path,
    sigma_beta_violations,
    tau_pm_h,
)
from free_boundary_lab.core.exceptions import DomainError
from free_boundary_lab.services.random_streams import MCSummary, concat, run_batches

KS_COEFFICIENT = 1.63
MIN_BIN_COUNT = 500
UNIFORM_CELLS = 10


@dataclass(frozen=True)
class SuiteResult:
    """One named check: the statistic, the threshold it is compared with and the verdict.

    ``asserted`` is False for trends that are reported but never fail the suite.
    """

    name: str
    statistic: float
    threshold: float
    passed: bool
    detail: str = ""
    asserted: bool = True

    @property
    def verdict(self) -> str:
        if not self.asserted:
            return "INFO"
        return "PASS" if self.passed else "FAIL"


def _sample(
    n_paths: int, horizon: float, n_steps: int, seed: int, stage: str, workers: int, batch_size: int,
    fn: Callable[[PitmanPath], object], bridge_max: bool = True,
) -> list:
    dt = horizon / n_steps

    def batch(rng: np.random.Generator, n: int, index: int):
        return fn(sample_pitman_path(n_steps, dt, rng, n, bridge_max, seed, index))

    return run_batches(batch, n_paths, seed, stage, workers, batch_size)


def marginal_checks(
    n_paths: int, seed: int, times=(0.25, 1.0), n_steps: int = 4, workers: int = 1, batch_size: int = 20000
) -> list[SuiteResult]:
    """KS tests of rho_t against the Bessel(3) marginal and of -W_t against N(0, t), plus E[rho_1].

    The marginal density of rho_t is the Maxwell law with scale sqrt(t).
    """
    results = []
    threshold = KS_COEFFICIENT / math.sqrt(n_paths)
    horizon = max(times)
    samples = _sample(
        n_paths, horizon, n_steps, seed, "bessel:marginal", workers, batch_size,
        lambda p: (p.rho.copy(), -p.W),
    )
    rho = np.concatenate([s[0] for s in samples])
    minus_w = np.concatenate([s[1] for s in samples])
    for t in times:
        col = int(round(t / horizon * n_steps))
        d_rho = stats.kstest(rho[:, col], stats.maxwell(scale=math.sqrt(t)).cdf).statistic
        d_w = stats.kstest(minus_w[:, col], stats.norm(scale=math.sqrt(t)).cdf).statistic
        results.append(SuiteResult(f"ks_rho_t={t:g}", float(d_rho), threshold, bool(d_rho < threshold)))
        results.append(SuiteResult(f"ks_minus_W_t={t:g}", float(d_w), threshold, bool(d_w < threshold)))
    if 1.0 in times:
        col = int(round(1.0 / horizon * n_steps))
        summary = MCSummary.from_samples(rho[:, col])
        exact = 2.0 * math.sqrt(2.0 / math.pi)
        gap = abs(summary.mean - exact)
        results.append(SuiteResult("mean_rho_1", gap, 3.0 * summary.se, bool(gap <= 3.0 * summary.se),
                                   f"estimate={summary.mean:.6f} exact={exact:.6f}"))
    return results


def _merge_bins(counts: np.ndarray, minimum: int) -> list[tuple[int, int]]:
    """Contiguous groups of bins whose counts reach ``minimum``; a short tail joins the last group."""
    groups, start, acc = [], 0, 0
    for i, c in enumerate(counts):
        acc += int(c)
        if acc >= minimum:
            groups.append((start, i + 1))
            start, acc = i + 1, 0
    if start < len(counts):
        if groups:
            groups[-1] = (groups[-1][0], len(counts))
        else:
            groups.append((0, len(counts)))
    return groups


def conditional_J_law_check(
    n_paths: int, t: float, n_bins: int, seed: int, workers: int = 1, batch_size: int = 20000, alpha: float = 0.01
) -> SuiteResult:
    """Chi-square test that Wbar_t / rho_t is Uniform(0, 1) within bins of rho_t.

    P(J_t <= u | rho_t = y) = u / y makes the ratio uniform whatever the bin; bins with fewer
    than 500 samples are merged with their neighbours. The per-bin statistics are pooled by
    summing them (and their degrees of freedom).

    Raises:
        DomainError: If t <= 0.
    """
    if not t > 0.0:
        raise DomainError("t must be positive")
    samples = _sample(
        n_paths, t, 4, seed, "bessel:conditional", workers, batch_size,
        lambda p: (p.rho[:, -1].copy(), p.Wbar[:, -1].copy()),
    )
    rho = concat([s[0] for s in samples])
    ratio = concat([s[1] for s in samples]) / rho
    edges = np.quantile(rho, np.linspace(0.0, 1.0, n_bins + 1))
    which = np.clip(np.searchsorted(edges, rho, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    pooled_stat, pooled_df, p_values = 0.0, 0, []
    for lo, hi in _merge_bins(counts, MIN_BIN_COUNT):
        in_bin = ratio[(which >= lo) & (which < hi)]
        observed, _ = np.histogram(in_bin, bins=UNIFORM_CELLS, range=(0.0, 1.0))
        test = stats.chisquare(observed)
        pooled_stat += float(test.statistic)
        pooled_df += UNIFORM_CELLS - 1
        p_values.append(float(test.pvalue))
    p_pooled = float(stats.chi2.sf(pooled_stat, pooled_df))
    logger.debug("Conditional J law: per-bin p-values {}", ", ".join(f"{p:.3f}" for p in p_values))
    return SuiteResult(
        f"conditional_J_uniform_t={t:g}", p_pooled, alpha, p_pooled > alpha,
        f"bins={len(p_values)} min_bin_p={min(p_values):.4f}",
    )


def inverse_moment_exact(p: float, t: float = 1.0) -> float:
    """E[rho_t^{-p}] by quadrature of the Bessel(3) density (finite for p < 3)."""
    if p >= 3.0:
        return math.inf
    density = stats.maxwell(scale=math.sqrt(t)).pdf
    value, _ = quad(lambda y: y ** (-p) * density(y), 0.0, np.inf, limit=200)
    return value


def _rho_one(n_paths: int, seed: int, stage: str, workers: int, batch_size: int) -> np.ndarray:
    return concat(_sample(n_paths, 1.0, 1, seed, stage, workers, batch_size, lambda p: p.rho[:, -1].copy()))


def inverse_moment_checks(
    n_paths: int, seed: int, workers: int = 1, batch_size: int = 20000, doublings: int = 3
) -> list[SuiteResult]:
    """E[1/rho_1] and E[1/rho_1^2] against quadrature; the p = 3 estimate under sample doubling.

    1/rho^2 has infinite variance, so its tolerance adds 2% of the exact value to 3 standard
    errors. The p = 3 row is informational: the estimate keeps growing as samples double.
    """
    rho = _rho_one(n_paths, seed, "bessel:inverse", workers, batch_size)
    results = []
    for p, slack in ((1, 0.0), (2, 0.02)):
        exact = inverse_moment_exact(p)
        summary = MCSummary.from_samples(rho ** (-float(p)))
        gap = abs(summary.mean - exact)
        tol = 3.0 * summary.se + slack * exact
        results.append(SuiteResult(f"inverse_moment_p={p}", gap, tol, bool(gap <= tol),
                                   f"estimate={summary.mean:.6f} exact={exact:.6f}"))
    estimates = []
    for k in range(doublings):
        sample = _rho_one(n_paths * 2**k, seed, f"bessel:inverse3:{k}", workers, batch_size)
        estimates.append(MCSummary.from_samples(sample ** -3.0).mean)
    results.append(SuiteResult(
        "inverse_moment_p=3_doubling", estimates[-1], estimates[0], True,
        "estimates=" + ",".join(f"{e:.4g}" for e in estimates), asserted=False,
    ))
    return results


def exponential_moment_checks(
    n_paths: int, seed: int, pairs=((0.5, 1.0), (1.0, 0.5)), n_steps: int = 200,
    workers: int = 1, batch_size: int = 5000,
) -> list[SuiteResult]:
    """Sample means of exp(int Gamma d rho) over [0, S] against sqrt(2) e^{5 K^2 S}.

    Two integrands per (K, S): Gamma = K (the integral is K rho_S) and Gamma = K cos(rho), the
    latter by left-point sums on the path.
    """
    results = []
    for K, S in pairs:
        bound = math.sqrt(2.0) * math.exp(5.0 * K * K * S)

        def functionals(p: PitmanPath, K=K):
            const = np.exp(K * p.rho[:, -1])
            integrand = K * np.cos(p.rho[:, :-1])
            varying = np.exp(np.sum(integrand * np.diff(p.rho, axis=1), axis=1))
            return const, varying

        samples = _sample(n_paths, S, n_steps, seed, f"bessel:expbound:{K:g}:{S:g}", workers, batch_size, functionals)
        for label, idx in (("const", 0), ("cos", 1)):
            summary = MCSummary.from_samples(concat([s[idx] for s in samples]))
            ok = summary.mean <= bound + 3.0 * summary.se
            results.append(SuiteResult(
                f"exp_moment_{label}_K={K:g}_S={S:g}", summary.mean, bound, bool(ok),
                f"se={summary.se:.3g}",
            ))
    return results


def linear_phi(phi0: float, slope: float) -> Callable[[np.ndarray], np.ndarray]:
    """phi(s) = phi0 + slope * s."""
    return lambda s: phi0 + slope * np.asarray(s, dtype=float)


def first_passage_bound_check(
    n_paths: int, seed: int, phi0: float = -0.6, c_phi: float = 0.5, h: float = 0.1,
    pairs=((0.2, 0.25), (0.4, 0.5), (0.6, 0.64), (0.5, 0.9)), n_steps: int = 1000,
    workers: int = 1, batch_size: int = 2000,
) -> list[SuiteResult]:
    """P(tau^{-h} in [t1, t2]) against sqrt(8/(pi t1)) (sqrt(d) E[sup rho on [0,1]] + c_phi d).

    phi decreases with slope -c_phi, the extreme case of the Lipschitz condition. Each pair is
    checked against its explicit bound; the fitted constants C = P sqrt(t1 / d) are summarised
    in one row whose threshold is the largest constant the bound allows.
    """
    horizon = max(t2 for _, t2 in pairs)
    if horizon < 1.0:
        horizon = 1.0
    phi = linear_phi(phi0, -c_phi)

    def functionals(p: PitmanPath):
        tau = tau_pm_h(p, phi, h).tau_minus
        k_one = int(round(1.0 / p.dt_path))
        return tau, np.max(p.rho[:, : k_one + 1], axis=1)

    samples = _sample(n_paths, horizon, n_steps, seed, "bessel:firstpassage", workers, batch_size, functionals)
    tau = concat([s[0] for s in samples])
    sup_mean = MCSummary.from_samples(concat([s[1] for s in samples])).mean
    results, constants, caps = [], [], []
    for t1, t2 in pairs:
        d = t2 - t1
        summary = MCSummary.from_samples(((tau >= t1) & (tau <= t2)).astype(float))
        bound = math.sqrt(8.0 / (math.pi * t1)) * (math.sqrt(d) * sup_mean + c_phi * d)
        results.append(SuiteResult(
            f"first_passage_t1={t1:g}_t2={t2:g}", summary.mean, bound,
            bool(summary.mean <= bound + 3.0 * summary.se), f"se={summary.se:.3g}",
        ))
        constants.append(summary.mean * math.sqrt(t1 / d))
        caps.append(math.sqrt(8.0 / math.pi) * (sup_mean + c_phi * math.sqrt(d)))
    c_max = max(constants)
    results.append(SuiteResult(
        "first_passage_fitted_constant", c_max, max(caps), bool(np.isfinite(c_max) and c_max <= max(caps)),
        "C=" + ",".join(f"{c:.4f}" for c in constants),
    ))
    return results


def sigma_beta_check(
    n_paths: int, seed: int, phi0: float = -0.6, c_phi: float = 0.5, h: float = 0.1,
    horizon: float = 2.0, n_steps: int = 2000, workers: int = 1, batch_size: int = 1000,
) -> SuiteResult:
    """Counts paths where the +h passage comes after tau^{-h} + sigma^beta_{2h} (expected: none)."""
    phi = linear_phi(phi0, -c_phi)
    samples = _sample(
        n_paths, horizon, n_steps, seed, "bessel:sigmabeta", workers, batch_size,
        lambda p: sigma_beta_violations(p, phi, h, c_phi),
    )
    violations = sum(v for v, _ in samples)
    tested = sum(n for _, n in samples)
    return SuiteResult("sigma_beta_ordering", float(violations), 0.0, violations == 0, f"tested={tested}")


def _test_curve(T1: float, c0: float, slope: float) -> BoundaryCurveY:
    t_nodes = np.array([0.0, T1])
    return BoundaryCurveY.from_arrays(t_nodes, c0 + slope * t_nodes, np.full(2, slope))


def theta_ordering_check(
    n_paths: int, seed: int, h: float = 0.05, T1: float = 1.0, y2: float = 1.0, c0: float = 0.0,
    slope: float = 0.2, n_steps: int = 1000, workers: int = 1, batch_size: int = 2000,
) -> SuiteResult:
    """theta_h >= tau^{-h} with phi(s) = c(s) - y2, pathwise on interpolated crossings."""
    curve = _test_curve(T1, c0, slope)

    def phi(s):
        return curve.c_at(np.minimum(s, T1)) - y2

    def violations(p: PitmanPath):
        theta_h, _ = hitting_time_theta_h(p, curve, 0.0, T1, y2, h)
        tau = tau_pm_h(p, phi, h).tau_minus
        return int(np.sum(theta_h < tau - 1e-12))

    count = sum(_sample(n_paths, T1, n_steps, seed, "bessel:thetaorder", workers, batch_size, violations))
    return SuiteResult("theta_h_after_tau_minus_h", float(count), 0.0, count == 0)


def theta_h_convergence_check(
    n_paths: int, seed: int, h_list=(0.1, 0.05, 0.01), T1: float = 1.0, y2: float = 1.0,
    n_steps: int = 1000, workers: int = 1, batch_size: int = 2000, alpha: float = 0.001,
) -> SuiteResult:
    """Law of theta_h on {theta_h < T1, Wbar up to theta_h <= h} against theta on {theta < T1}.

    On that event h - W is a Brownian motion kept away from 0 until it reaches the barrier,
    whose exit time tends to the Bessel one as h shrinks. The decile drift is reported for every
    h; the verdict is a two-sample KS test at the smallest h. Runs on the same paths for all h.
    """
    curve = _test_curve(T1, 0.0, 0.0)
    deciles = np.linspace(0.1, 0.9, 9)

    def functionals(p: PitmanPath):
        th = hitting_time_theta(p, curve, 0.0, T1, y2)
        rows = []
        for h in h_list:
            theta_h, index = hitting_time_theta_h(p, curve, 0.0, T1, y2, h)
            crossed = theta_h < T1
            index = np.where(crossed, index, 0.0)
            keep = crossed & (p.Wbar[np.arange(p.n_paths), np.ceil(index).astype(int)] <= h)
            rows.append(theta_h[keep])
        return th.theta[th.crossed], rows

    samples = _sample(n_paths, T1, n_steps, seed, "bessel:thetaconv", workers, batch_size, functionals)
    theta = concat([s[0] for s in samples])
    q_theta = np.quantile(theta, deciles)
    drifts, kept = [], None
    for j, h in enumerate(h_list):
        kept = concat([s[1][j] for s in samples])
        drifts.append(float(np.max(np.abs(np.quantile(kept, deciles) - q_theta))) if kept.size else math.inf)
    p_value = float(stats.ks_2samp(kept, theta).pvalue) if kept.size else 0.0
    return SuiteResult(
        "theta_h_to_theta", p_value, alpha, p_value > alpha,
        "drift=" + ",".join(f"h={h:g}:{d:.4f}" for h, d in zip(h_list, drifts)) + f" n_kept={kept.size}",
    )


def weight_step_halving_check(
    n_paths: int, seed: int, K: float = 0.5, S: float = 1.0, levels: int = 4, base_steps: int = 25,
    workers: int = 1,
) -> SuiteResult:
    """Mean |L(dt) - L(dt/2)| for gamma = K cos(y) on successively halved steps of the same paths.

    Passes when the differences shrink from the coarsest to the finest pair.
    """
    finest = base_steps * 2**levels
    curve = _test_curve(S, 0.0, 0.0)

    def gamma(t, y):
        return K * np.cos(y) + 0.0 * t

    def functionals(p: PitmanPath):
        weights = []
        for level in range(levels + 1):
            coarse = p.coarsen(2 ** (levels - level))
            exponent, _ = cumulative_log_weight(coarse, curve, gamma, 0.0, coarse.n_steps)
            weights.append(np.exp(exponent[:, -1]))
        return np.array([math.fsum(np.abs(weights[i] - weights[i + 1])) for i in range(levels)])

    totals = _sample(n_paths, S, finest, seed, "bessel:halving", workers, 500, functionals)
    diffs = np.sum(totals, axis=0) / n_paths
    return SuiteResult(
        "weight_step_halving", float(diffs[-1]), float(diffs[0]), bool(diffs[-1] < diffs[0]),
        "diffs=" + ",".join(f"{d:.4g}" for d in diffs),
    )


def run_bessel_suite(
    n_paths: int = 100_000, seed: int = 0, workers: int = 1, quick: Optional[bool] = None
) -> list[SuiteResult]:
    """Runs every check with sample sizes derived from ``n_paths``.

    Path-heavy checks (fine grids on [0, 2]) use a tenth or a hundredth of ``n_paths``.

    Args:
        n_paths: Sample size of the distributional tests.
        seed: Root seed; each check derives its own stage streams.
        workers: Thread count.
        quick: Halve the heavy checks again (used by the test suite).

    Returns:
        Results in a fixed order.
    """
    heavy = max(n_paths // (20 if quick else 10), 1000)
    light = max(n_paths // (200 if quick else 100), 200)
    results: list[SuiteResult] = []
    results += marginal_checks(n_paths, seed, workers=workers)
    results.append(conditional_J_law_check(2 * n_paths, 1.0, 20, seed, workers=workers))
    results += inverse_moment_checks(n_paths, seed, workers=workers)
    results += exponential_moment_checks(heavy, seed, workers=workers)
    results += first_passage_bound_check(heavy, seed, workers=workers)
    results.append(sigma_beta_check(light, seed, workers=workers))
    results.append(theta_ordering_check(heavy, seed, workers=workers))
    results.append(theta_h_convergence_check(heavy, seed, workers=workers))
    results.append(weight_step_halving_check(min(heavy, 2000), seed, workers=workers))
    for r in results:
        logger.info("{:<40} {:>12.5g} vs {:<12.5g} {}", r.name, r.statistic, r.threshold, r.verdict)
    return results
