"""
File: pde_checks.py
Description: Cross-checks of the solved surface: binomial oracle, Monte Carlo u_dot
    representation, boundary regularity bounds, smooth fit, complementarity and the
    scale-function hitting probability.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger

from free_boundary_lab.core.exceptions import DomainError, NumericalFailureError
from free_boundary_lab.core.model import ProblemSpec, bigH_values, h_values, scale_function
from free_boundary_lab.core.pde_solver import ValueSurface
from free_boundary_lab.services.random_streams import MCSummary, concat, run_batches


def binomial_american_value(
    kind: str, S0: float, K: float, r: float, delta: float, sigma: float, T: float, n_steps: int = 5000
) -> float:
    """Cox-Ross-Rubinstein value of an American put or call with dividend yield.

    Args:
        kind: "put" or "call".
        S0: Spot.
        K: Strike.
        r: Interest rate.
        delta: Dividend yield.
        sigma: Volatility.
        T: Maturity.
        n_steps: Tree depth.

    Returns:
        The tree value at time 0.
    """
    sign = -1.0 if kind in ("put", "custom_time_inhomogeneous") else 1.0
    dt = T / n_steps
    up = math.exp(sigma * math.sqrt(dt))
    down = 1.0 / up
    p = (math.exp((r - delta) * dt) - down) / (up - down)
    disc = math.exp(-r * dt)
    if not 0.0 < p < 1.0:
        raise DomainError(f"Binomial tree is not arbitrage-free for dt={dt}")

    def spots(i: int) -> np.ndarray:
        return S0 * up ** np.arange(i, -i - 1, -2, dtype=float)

    values = np.maximum(sign * (spots(n_steps) - K), 0.0)
    for i in range(n_steps - 1, -1, -1):
        cont = disc * (p * values[:-1] + (1.0 - p) * values[1:])
        values = np.maximum(sign * (spots(i) - K), cont)
    return float(values[0])


@dataclass(frozen=True)
class UdotCheck:
    """Monte Carlo evaluation of the u_dot representation at one point."""

    t: float
    x: float
    mc_value: float
    std_err: float
    fd_value: float
    escape_fraction: float
    n_paths: int
    dt_mc: float


def default_dt_mc(surface: ValueSurface) -> float:
    """min(dt, (dx / sigma_max)^2) / 4 with sigma_max over the rectangle."""
    spec, grid = surface.spec, surface.grid
    xs = grid.x_nodes[grid.i_x1 : grid.i_x2 + 1]
    sigma_max = float(np.max(np.asarray(spec.diffusion.sigma(xs), dtype=float)))
    return min(grid.dt, (grid.dx / sigma_max) ** 2) / 4.0


def hit_fraction(x0: np.ndarray, x1: np.ndarray, level0, level1) -> np.ndarray:
    """Fraction of a step at which the segment x0 -> x1 meets the segment level0 -> level1.

    Assumes x0 and x1 lie on opposite sides (or x1 on the level); clipped to [0, 1].
    """
    gap0 = np.asarray(x0, dtype=float) - level0
    gap1 = np.asarray(x1, dtype=float) - level1
    denom = gap0 - gap1
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(denom != 0.0, gap0 / denom, 1.0)
    return np.clip(frac, 0.0, 1.0)


def mc_udot_check(
    spec: ProblemSpec,
    surface: ValueSurface,
    t: float,
    x: float,
    n_paths: int,
    seed: int,
    dt_mc: Optional[float] = None,
    workers: int = 1,
    batch_size: int = 2000,
) -> UdotCheck:
    """Simulates the stopped representation of u_dot(t, x) and compares it with the grid value.

    Paths run by Euler-Maruyama until they cross the boundary (contributing 0), cross the far
    edge of the rectangle (discounted u_dot there) or reach T1 (discounted u_dot(T1, X)); the
    running integral of the discounted source H is added for time-inhomogeneous problems.
    Crossing times inside a step come from linear interpolation of the path against the
    boundary (or the edge) between the step ends; the source integral stops there.

    Raises:
        DomainError: If (t, x) is not inside the continuation part of the rectangle.
    """
    T1 = spec.rect_T1
    fd_value = float(surface.interp("u_dot", t, x))
    b_t = float(surface.boundary_at(t))
    inside = (b_t < x <= spec.rect_x2) if spec.stop_below else (spec.rect_x1 <= x < b_t)
    if not inside or not 0.0 <= t <= T1:
        raise DomainError(f"({t}, {x}) is not in the continuation part of the rectangle")
    dt_mc = default_dt_mc(surface) if dt_mc is None else dt_mc
    if T1 - t <= 0.0:
        return UdotCheck(t, x, fd_value, 0.0, fd_value, 0.0, 0, dt_mc)

    n_steps = max(1, int(math.ceil((T1 - t) / dt_mc)))
    dt = (T1 - t) / n_steps
    far = spec.rect_x2 if spec.stop_below else spec.rect_x1
    x_lo, x_hi = surface.grid.x_nodes[0], surface.grid.x_nodes[-1]
    diff, disc = spec.diffusion, spec.discount

    def batch(rng: np.random.Generator, n: int, _index: int):
        X = np.full(n, float(x))
        log_d = np.zeros(n)
        acc = np.zeros(n)
        alive = np.ones(n, dtype=bool)
        escaped = np.zeros(n, dtype=bool)
        b_now = float(surface.boundary_at(t))
        for k in range(n_steps):
            tk = t + k * dt
            rate = np.broadcast_to(np.asarray(disc.r(tk, X), dtype=float), X.shape)
            source = None
            if not spec.time_homogeneous:
                u_val, u_x_val = surface.local_u(tk, X)
                source = np.exp(log_d) * bigH_values(spec, tk, X, u_val, u_x_val) * dt
                acc += np.where(alive, source, 0.0)
            drift = np.asarray(diff.mu(tk, X), dtype=float)
            vol = np.asarray(diff.sigma(X), dtype=float)
            X_new = X + drift * dt + vol * math.sqrt(dt) * rng.standard_normal(n)
            escaped |= alive & ((X_new < x_lo) | (X_new > x_hi))
            b_next = float(surface.boundary_at(tk + dt))
            if spec.stop_below:
                hit_b = alive & (X_new <= b_next)
                hit_far = alive & ~hit_b & (X_new >= far)
            else:
                hit_b = alive & (X_new >= b_next)
                hit_far = alive & ~hit_b & (X_new <= far)
            if source is not None and hit_b.any():
                frac_b = hit_fraction(X[hit_b], X_new[hit_b], b_now, b_next)
                acc[hit_b] -= (1.0 - frac_b) * source[hit_b]
            if hit_far.any():
                frac = hit_fraction(X[hit_far], X_new[hit_far], far, far)
                tau = tk + frac * dt
                weight = np.exp(log_d[hit_far] - frac * rate[hit_far] * dt)
                acc[hit_far] += weight * surface.interp("u_dot", tau, np.full(tau.shape, far))
                if source is not None:
                    acc[hit_far] -= (1.0 - frac) * source[hit_far]
            b_now = b_next
            alive &= ~(hit_b | hit_far)
            log_d = log_d - rate * dt
            X = np.where(alive, X_new, X)
            if not alive.any():
                break
        if alive.any():
            acc[alive] += np.exp(log_d[alive]) * surface.interp("u_dot", T1, X[alive])
        return acc, escaped

    results = run_batches(batch, n_paths, seed, f"udot:{t:.6g}:{x:.6g}", workers, batch_size)
    summary = MCSummary.from_samples(concat([r[0] for r in results]))
    escape_fraction = float(np.mean(concat([r[1] for r in results])))
    logger.info("u_dot at ({:.4g}, {:.4g}): MC {:.6g} +- {:.2g}, grid {:.6g}", t, x,
                summary.mean, summary.se, fd_value)
    return UdotCheck(t, x, summary.mean, summary.se, fd_value, escape_fraction, n_paths, dt)


def _distance_to_boundary(surface: ValueSurface, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x - b if surface.spec.stop_below else b - x


@dataclass(frozen=True)
class BoundCheck:
    """Empirical constant of a bound, optionally on a refined grid."""

    value: float
    refined_value: Optional[float]
    growth: Optional[float]
    passed: bool


def _growth(coarse: float, fine: Optional[float]) -> Optional[float]:
    if fine is None:
        return None
    return (fine - coarse) / coarse if coarse > 0 else 0.0


def dotv_ratio(surface: ValueSurface, T1: float) -> float:
    """max |u_dot| / [(x - b)(1 + (T1 - t)^(-1/2))] over continuation nodes with t < T1."""
    grid, spec = surface.grid, surface.spec
    rows = np.nonzero(grid.t_nodes < T1 - 1e-12)[0]
    x = grid.x_nodes[grid.i_x1 : grid.i_x2 + 1]
    worst = 0.0
    for i in rows:
        dist = _distance_to_boundary(surface, x, surface.b[i])
        ok = dist >= 0.5 * grid.dx
        if not ok.any():
            continue
        weight = 1.0 + 1.0 / math.sqrt(T1 - grid.t_nodes[i])
        ratio = np.abs(surface.u_dot[i, grid.i_x1 : grid.i_x2 + 1][ok]) / (dist[ok] * weight)
        worst = max(worst, float(np.max(ratio)))
    return worst


def dotv_bound_check(
    surface: ValueSurface, T1: float, refined: Optional[ValueSurface] = None, growth_tol: float = 0.10
) -> BoundCheck:
    """Empirical constant of |u_dot| <= c (x - b)(1 + (T1 - t)^(-1/2)).

    Passes when the constant is finite and, given a refined surface, grows by less than
    ``growth_tol`` under refinement.

    Raises:
        DomainError: If the problem is time-inhomogeneous.
    """
    if not surface.spec.time_homogeneous:
        raise DomainError("The u_dot bound is checked on time-homogeneous problems only")
    value = dotv_ratio(surface, T1)
    fine = dotv_ratio(refined, T1) if refined is not None else None
    growth = _growth(value, fine)
    passed = math.isfinite(value) and (growth is None or growth < growth_tol)
    return BoundCheck(value, fine, growth, passed)


@dataclass(frozen=True)
class LipschitzCheck:
    """Boundary slope statistics on [0, T2]."""

    max_slope: float
    min_slope: float
    refined_max_slope: Optional[float]
    growth: Optional[float]
    apriori_bound: Optional[float]
    monotone: bool
    passed: bool


def _slopes(surface: ValueSurface, T2: float) -> np.ndarray:
    grid = surface.grid
    n = int(np.searchsorted(grid.t_nodes, T2 + 1e-12, side="right"))
    return np.diff(surface.b[:n]) / grid.dt


def apriori_slope_bound(surface: ValueSurface, c: float, T2: float) -> float:
    """2 c (1 + (T1 - T2)^(-1/2)) sup sigma^2 / |h| over the rectangle."""
    spec, grid = surface.spec, surface.grid
    ts = grid.t_nodes[grid.t_nodes <= spec.rect_T1 + 1e-12]
    xs = grid.x_nodes[grid.i_x1 : grid.i_x2 + 1]
    T, X = np.meshgrid(ts, xs, indexing="ij")
    ratio = np.asarray(spec.diffusion.sigma(X), dtype=float) ** 2 / np.abs(h_values(spec, T, X))
    return 2.0 * c * (1.0 + 1.0 / math.sqrt(spec.rect_T1 - T2)) * float(np.max(ratio))


def lipschitz_ratio_check(
    surface: ValueSurface,
    T2: float,
    refined: Optional[ValueSurface] = None,
    dotv_constant: Optional[float] = None,
    growth_tol: float = 0.10,
) -> LipschitzCheck:
    """Maximum slope of b between adjacent slices on [0, T2].

    Args:
        surface: Surface with extracted boundary.
        T2: End of the verification window, T2 < T1.
        refined: Optional surface on the halved grid.
        dotv_constant: Fitted constant of the u_dot bound; enables the a-priori slope bound.
        growth_tol: Allowed relative growth under refinement.

    Raises:
        DomainError: If T2 >= T1 or the problem is time-inhomogeneous.
    """
    spec = surface.spec
    if not spec.time_homogeneous:
        raise DomainError("The Lipschitz check needs a time-homogeneous problem")
    if not T2 < spec.rect_T1:
        raise DomainError(f"T2={T2} must be below T1={spec.rect_T1}")
    slopes = _slopes(surface, T2)
    orient = 1.0 if spec.stop_below else -1.0
    max_slope = float(np.max(np.abs(slopes)))
    tol = surface.grid.dx / surface.grid.dt
    monotone = bool(np.all(orient * slopes >= -tol))
    fine = float(np.max(np.abs(_slopes(refined, T2)))) if refined is not None else None
    growth = _growth(max_slope, fine)
    bound = apriori_slope_bound(surface, dotv_constant, T2) if dotv_constant is not None else None
    passed = (
        math.isfinite(max_slope)
        and monotone
        and (growth is None or growth < growth_tol)
        and (bound is None or max_slope <= bound)
    )
    return LipschitzCheck(max_slope, float(np.min(orient * slopes)), fine, growth, bound, monotone, passed)


@dataclass(frozen=True)
class SmoothFitCheck:
    """Smooth fit and curvature diagnostics at the boundary on [t_lo, T2]."""

    ux_over_dx: float
    curvature_rel_err_median: float
    curvature_rel_err_max: float
    passed: bool


def smooth_fit_check(surface: ValueSurface, T2: float, rel_tol: float = 0.10) -> SmoothFitCheck:
    """u_x at the first continuation node against dx, and u_xx there against -2h/sigma^2."""
    spec, grid = surface.spec, surface.grid
    step = 1 if spec.stop_below else -1
    ux_ratio, errors = [], []
    for i in np.nonzero((grid.t_nodes >= 0.1 * spec.rect_T1) & (grid.t_nodes <= T2))[0]:
        b = surface.b[i]
        if step == 1:
            j = int(np.searchsorted(grid.x_nodes, b, side="right"))
        else:
            j = int(np.searchsorted(grid.x_nodes, b, side="left")) - 1
        ux_ratio.append(abs(surface.u_x[i, j]) / grid.dx)
        t = grid.t_nodes[i]
        target = -2.0 * float(h_values(spec, t, b)) / float(spec.diffusion.sigma(b)) ** 2
        errors.append(abs(surface.u_xx[i, j] - target) / abs(target))
    errors = np.asarray(errors)
    median = float(np.median(errors))
    return SmoothFitCheck(float(np.max(ux_ratio)), median, float(np.max(errors)), median <= rel_tol)


@dataclass(frozen=True)
class ComplementarityCheck:
    """Node classification of the discrete variational inequality on [0, T1] x [x1, x2]."""

    n_active: int
    n_contact: int
    n_misclassified: int
    max_interior_residual: float
    passed: bool


def pde_operator_residual(surface: ValueSurface) -> np.ndarray:
    """v_t + (sigma^2/2) v_xx + mu v_x - r v by central differences (NaN on grid edges)."""
    spec, grid = surface.spec, surface.grid
    v = surface.v
    T, X = np.meshgrid(grid.t_nodes, grid.x_nodes, indexing="ij")
    v_t = np.gradient(v, grid.dt, axis=0, edge_order=2)
    v_x = np.gradient(v, grid.dx, axis=1)
    v_xx = np.full_like(v, np.nan)
    v_xx[:, 1:-1] = (v[:, 2:] - 2.0 * v[:, 1:-1] + v[:, :-2]) / grid.dx**2
    sig2 = np.asarray(spec.diffusion.sigma(X), dtype=float) ** 2
    return (
        v_t + 0.5 * sig2 * v_xx
        + np.asarray(spec.diffusion.mu(T, X), dtype=float) * v_x
        - np.asarray(spec.discount.r(T, X), dtype=float) * v
    )


def complementarity_check(surface: ValueSurface, margin_nodes: int = 2) -> ComplementarityCheck:
    """Classifies rectangle nodes as PDE-active (u > eps) or contact.

    A node is misclassified when it is PDE-active on the stopping side more than
    ``margin_nodes`` from b, or contact on the continuation side more than ``margin_nodes``
    from b. The interior residual is the largest |v_t + L v - r v| over active nodes at least
    ``margin_nodes`` from b.
    """
    spec, grid = surface.spec, surface.grid
    rows = np.nonzero((grid.t_nodes > 0.0) & (grid.t_nodes <= spec.rect_T1 + 1e-12))[0]
    cols = slice(grid.i_x1, grid.i_x2 + 1)
    x = grid.x_nodes[cols]
    residual = pde_operator_residual(surface)
    eps = surface.eps if surface.eps is not None else 1e-8 * surface.scale
    n_active = n_contact = n_bad = 0
    worst = 0.0
    for i in rows:
        dist = _distance_to_boundary(surface, x, surface.b[i])
        active = surface.u[i, cols] > eps
        n_active += int(active.sum())
        n_contact += int((~active).sum())
        far = np.abs(dist) > margin_nodes * grid.dx
        n_bad += int(np.sum(far & (active != (dist > 0))))
        deep = active & (dist > margin_nodes * grid.dx)
        if deep.any():
            worst = max(worst, float(np.nanmax(np.abs(residual[i, cols][deep]))))
    return ComplementarityCheck(n_active, n_contact, n_bad, worst, n_bad == 0)


@dataclass(frozen=True)
class HittingCheck:
    """Two-sided exit probability by Monte Carlo and by the scale function."""

    t: float
    x: float
    mc_prob: float
    std_err: float
    scale_prob: float
    dt_mc: float


def hitting_prob_check(
    spec: ProblemSpec,
    surface: ValueSurface,
    t: float,
    x: float,
    n_paths: int,
    seed: int,
    dt_mc: float = 1e-4,
    workers: int = 1,
    max_time: float = 100.0,
) -> HittingCheck:
    """P_x(X reaches x2 before b(t)) by Euler-Maruyama against (S(x) - S(b))/(S(x2) - S(b)).

    Raises:
        DomainError: If the problem is not a time-homogeneous stop-below problem.
        NumericalFailureError: If paths are still inside after ``max_time``.
    """
    if not spec.stop_below:
        raise DomainError("hitting_prob_check covers the stop-below geometry")
    b = float(surface.boundary_at(t))
    S_b = scale_function(spec, b)
    S_top = scale_function(spec, spec.rect_x2)
    if x <= b:
        return HittingCheck(t, x, 0.0, 0.0, 0.0, dt_mc)
    if x >= spec.rect_x2:
        return HittingCheck(t, x, 1.0, 0.0, 1.0, dt_mc)
    scale_prob = (scale_function(spec, x) - S_b) / (S_top - S_b)
    top = spec.rect_x2
    diff = spec.diffusion
    max_steps = int(math.ceil(max_time / dt_mc))

    def batch(rng: np.random.Generator, n: int, _index: int):
        X = np.full(n, float(x))
        idx = np.arange(n)
        hit_top = np.zeros(n)
        for _ in range(max_steps):
            X = X + np.asarray(diff.mu(0.0, X), dtype=float) * dt_mc + np.asarray(
                diff.sigma(X), dtype=float
            ) * math.sqrt(dt_mc) * rng.standard_normal(X.size)
            up = X >= top
            down = X <= b
            hit_top[idx[up]] = 1.0
            keep = ~(up | down)
            X, idx = X[keep], idx[keep]
            if idx.size == 0:
                return hit_top
        raise NumericalFailureError(f"{idx.size} paths did not exit within t={max_time}", stage="boundary")

    results = run_batches(batch, n_paths, seed, f"hitting:{t:.6g}:{x:.6g}", workers, 2000)
    summary = MCSummary.from_samples(concat(results))
    return HittingCheck(t, x, summary.mean, summary.se, float(scale_prob), dt_mc)
