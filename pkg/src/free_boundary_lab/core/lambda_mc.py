"""
File: lambda_mc.py
Description: Monte Carlo estimation of the boundary-slope functional Lambda(t) on Pitman paths,
    the implied boundary velocity, the pre-limit representation V_h and the expansion study.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from loguru import logger

from free_boundary_lab.core.bessel import (
    BoundaryCurveY,
    PitmanPath,
    check_capped_fraction,
    cumulative_log_discount,
    cumulative_log_weight,
    hitting_time_theta,
    hitting_time_theta_h,
    sample_pitman_path,
    value_at_index,
)
from free_boundary_lab.core.exceptions import BoundaryEscapeError, DomainError, NumericalFailureError
from free_boundary_lab.core.model import LampertiMap, ProblemSpec, bigH_values, gamma_fn, h_values
from free_boundary_lab.core.pde_solver import ValueSurface
from free_boundary_lab.services.random_streams import MCSummary, concat, run_batches

INV_RHO_MEAN = math.sqrt(2.0 / math.pi)
HIGH_VARIANCE_FRACTION = 0.01

Paths = Union[PitmanPath, Sequence[PitmanPath]]


def lamperti_for(surface: ValueSurface) -> LampertiMap:
    """Lamperti map of the surface's diffusion, tabulated over the whole x-grid."""
    spec, grid = surface.spec, surface.grid
    return LampertiMap(
        spec.diffusion, spec.rect_x1, spec.rect_x2,
        table_lo=float(grid.x_nodes[0]), table_hi=float(grid.x_nodes[-1]),
    )


def build_boundary_curve_y(surface: ValueSurface, lamperti: LampertiMap) -> BoundaryCurveY:
    """Maps the extracted boundary to c = f(b) with c_dot = b_dot_fd / sigma(b).

    The curve covers the leading run of slices with a finite slope (at least [0, T1]).

    Raises:
        BoundaryEscapeError: If c leaves (y1, y2) on [0, T1].
    """
    spec, grid = surface.spec, surface.grid
    b = surface.require("b")
    b_dot = surface.require("b_dot_fd")
    ok = np.isfinite(b) & np.isfinite(b_dot)
    n = int(np.argmin(ok)) if not ok.all() else ok.size
    t_nodes = grid.t_nodes[:n]
    if n < 2 or t_nodes[-1] < spec.rect_T1 - 1e-12:
        raise BoundaryEscapeError("Boundary is not available on the whole of [0, T1]", stage="lambda")
    c = np.asarray(lamperti.f(b[:n]), dtype=float)
    c_dot = b_dot[:n] / np.asarray(spec.diffusion.sigma(b[:n]), dtype=float)
    inside = t_nodes <= spec.rect_T1 + 1e-12
    if np.any(c[inside] <= lamperti.y1) or np.any(c[inside] >= lamperti.y2):
        raise BoundaryEscapeError("Rescaled boundary leaves (y1, y2) on [0, T1]", stage="lambda")
    return BoundaryCurveY.from_arrays(t_nodes, c, c_dot)


class PathFunctionals:
    """Coefficients of the path functionals in Lamperti coordinates, clamped to [y1, y2]."""

    def __init__(self, spec: ProblemSpec, surface: ValueSurface, curve: BoundaryCurveY, lamperti: LampertiMap):
        if not spec.stop_below:
            raise DomainError("The Lambda estimators cover the stop-below geometry only")
        self.spec = spec
        self.surface = surface
        self.curve = curve
        self.lamperti = lamperti
        self.T1 = spec.rect_T1
        self.y1 = lamperti.y1
        self.y2 = lamperti.y2

    def x_of(self, y: np.ndarray) -> np.ndarray:
        return self.lamperti.f_inv_array(np.clip(y, self.y1, self.y2))

    def gamma(self, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.asarray(gamma_fn(self.spec, self.lamperti, t, y), dtype=float)

    def R(self, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.spec.discount.r(np.minimum(t, self.T1), self.x_of(y)), dtype=float)

    def w_dot(self, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.surface.interp("u_dot", np.minimum(t, self.T1), self.x_of(y))

    def F(self, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        t = np.minimum(np.asarray(t, dtype=float), self.T1)
        x = self.x_of(y)
        t, x = np.broadcast_arrays(t, x)
        if self.spec.time_homogeneous:
            return np.zeros(x.shape)
        u_val, u_x_val = self.surface.local_u(t, x)
        return np.asarray(bigH_values(self.spec, t, x, u_val, u_x_val), dtype=float)


@dataclass(frozen=True)
class LambdaEstimate:
    """Monte Carlo estimate of Lambda(t) = V1 + V2 + int V_s and the implied b_dot."""

    t: float
    V1: float
    V2: float
    intVs: float
    se_V1: float
    se_V2: float
    se_intVs: float
    V1plusV2: float
    se_V1plusV2: float
    Lambda: float
    se_Lambda: float
    bdot_formula: float
    se_bdot: float
    n_paths: int
    dt_path: float
    seed: int
    crossed_fraction: float
    small_rho_fraction: float
    high_variance: bool


@dataclass(frozen=True)
class VsIntegral:
    """int_0^{T1-t} V_s ds with its standard error and per-path values."""

    mean: float
    se: float
    per_path: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class VhEstimate:
    """Monte Carlo estimate of the pre-limit functional V_h(t) = w_dot(t, c(t) + h)."""

    t: float
    h: float
    value: float
    std_err: float
    p_B1: float
    p_B2: float
    n_paths: int


def _as_list(paths: Paths) -> list[PitmanPath]:
    return [paths] if isinstance(paths, PitmanPath) else list(paths)


def _horizon_steps(path: PitmanPath, horizon: float) -> int:
    n = int(math.ceil(horizon / path.dt_path - 1e-9))
    if n > path.n_steps:
        raise DomainError(f"Path horizon {path.horizon:.6g} is shorter than {horizon:.6g}")
    return n


def _vs_path_values(
    t: float, path: PitmanPath, fx: PathFunctionals, theta: np.ndarray, n_q: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-path trapezoid in q (s = q^2) of 2q 1_{s<theta} L D F / rho.

    Nodes with s < 2 dt_path use the s -> 0 limit 2 sqrt(2/pi) F(t, c(t)).
    """
    horizon = fx.T1 - t
    zeros = np.zeros(path.n_paths)
    if fx.spec.time_homogeneous:
        return zeros, np.zeros(path.n_paths, dtype=bool)
    n_use = _horizon_steps(path, horizon)
    log_l, capped = cumulative_log_weight(path, fx.curve, fx.gamma, t, n_use)
    log_d = cumulative_log_discount(path, fx.curve, fx.R, t, n_use)
    q = np.linspace(0.0, math.sqrt(horizon), n_q + 1)
    weights = np.full(q.size, q[1] - q[0])
    weights[[0, -1]] *= 0.5
    limit = 2.0 * INV_RHO_MEAN * float(fx.F(t, fx.curve.c_at(t)))
    total = np.zeros(path.n_paths)
    for q_m, w_m in zip(q, weights):
        s = q_m * q_m
        if s < 2.0 * path.dt_path:
            total += w_m * limit
            continue
        index = np.full(path.n_paths, s / path.dt_path)
        rho_s = value_at_index(path.rho, index)
        y = fx.curve.c_at(t + s) + rho_s
        integrand = (
            np.exp(value_at_index(log_l, index) + value_at_index(log_d, index))
            / rho_s * fx.F(t + s, y) * 2.0 * q_m
        )
        total += w_m * np.where(s < theta, integrand, 0.0)
    return total, capped


def estimate_Vs_integral(
    t: float,
    paths: Paths,
    surface: ValueSurface,
    curve: BoundaryCurveY,
    spec: ProblemSpec,
    lamperti: Optional[LampertiMap] = None,
    n_q: int = 64,
) -> VsIntegral:
    """int_0^{T1-t} V_s(t) ds on the given paths, quadrature in q = sqrt(s).

    Exactly 0 for time-homogeneous problems (H vanishes).

    Raises:
        NumericalFailureError: If too many path weights overflow.
    """
    fx = PathFunctionals(spec, surface, curve, lamperti or lamperti_for(surface))
    values, flags = [], []
    for path in _as_list(paths):
        theta = hitting_time_theta(path, curve, t, fx.T1, fx.y2).theta
        per_path, capped = _vs_path_values(t, path, fx, theta, n_q)
        values.append(per_path)
        flags.append(capped)
    check_capped_fraction(concat(flags), "lambda")
    per_path = concat(values)
    summary = MCSummary.from_samples(per_path)
    return VsIntegral(summary.mean, summary.se, per_path)


def _lambda_batch(t: float, path: PitmanPath, fx: PathFunctionals, rho_floor: float, n_q: int):
    horizon = fx.T1 - t
    n_use = _horizon_steps(path, horizon)
    th = hitting_time_theta(path, fx.curve, t, fx.T1, fx.y2)
    if np.any(th.rho_theta[th.crossed] <= 0.0):
        raise NumericalFailureError("rho at an upper-edge exit must be positive", stage="lambda")
    log_l, capped = cumulative_log_weight(path, fx.curve, fx.gamma, t, n_use)
    log_d = cumulative_log_discount(path, fx.curve, fx.R, t, n_use)
    weight = np.exp(value_at_index(log_l, th.index) + value_at_index(log_d, th.index))
    y_exit = np.where(th.crossed, fx.y2, fx.curve.c_at(t + th.theta) + th.rho_theta)
    v12 = weight * fx.w_dot(t + th.theta, y_exit) / th.rho_theta
    small = ~th.crossed & (th.rho_theta < rho_floor)
    vs, _ = _vs_path_values(t, path, fx, th.theta, n_q)
    return v12, vs, th.crossed, small, capped


def estimate_lambda(
    t: float,
    surface: ValueSurface,
    curve: BoundaryCurveY,
    spec: ProblemSpec,
    n_paths: int,
    dt_path: float,
    seed: int,
    lamperti: Optional[LampertiMap] = None,
    rho_floor: Optional[float] = None,
    bridge_max: bool = True,
    n_q: int = 64,
    T2: Optional[float] = None,
    workers: int = 1,
    batch_size: int = 500,
) -> LambdaEstimate:
    """Estimates Lambda(t) and b_dot(t) = sigma(b) Lambda / (2 h(t, b)).

    V1 + V2 is one expectation of L D w_dot / rho at theta; int V_s ds is evaluated on the same
    paths. Paths ending at T1 - t with rho below ``rho_floor`` are kept and counted; more than
    1% of them flags the estimate as high-variance.

    Args:
        t: Evaluation time, 0 <= t (<= T2 when given) < T1.
        surface: Solved surface with derivative fields.
        curve: Boundary in Lamperti coordinates built from ``surface``.
        spec: Problem specification (stop-below).
        n_paths: Number of Pitman paths.
        dt_path: Requested path step; adjusted so T1 - t is a whole number of steps.
        seed: Root seed.
        lamperti: Lamperti map; built from the surface when omitted.
        rho_floor: Small-rho threshold, 1e-3 (y2 - y1) by default.
        bridge_max: Exact per-step maxima.
        n_q: Quadrature nodes in q = sqrt(s).
        T2: Optional upper end of the verification window.
        workers: Thread count.
        batch_size: Paths per batch.

    Returns:
        The assembled LambdaEstimate.

    Raises:
        DomainError: If t is out of range or the geometry is stop-above.
        NumericalFailureError: If too many path weights overflow.
    """
    T1 = spec.rect_T1
    upper = T2 if T2 is not None else T1
    if not (0.0 <= t <= upper and t < T1):
        raise DomainError(f"t={t} must satisfy 0 <= t <= {upper} and t < T1={T1}")
    fx = PathFunctionals(spec, surface, curve, lamperti or lamperti_for(surface))
    rho_floor = 1e-3 * (fx.y2 - fx.y1) if rho_floor is None else rho_floor
    horizon = T1 - t
    n_steps = max(1, int(math.ceil(horizon / dt_path - 1e-9)))
    dt = horizon / n_steps

    def batch(rng: np.random.Generator, n: int, index: int):
        path = sample_pitman_path(n_steps, dt, rng, n, bridge_max, seed, index)
        return _lambda_batch(t, path, fx, rho_floor, n_q)

    results = run_batches(batch, n_paths, seed, f"lambda:{t:.9g}", workers, batch_size)
    v12 = concat([r[0] for r in results])
    vs = concat([r[1] for r in results])
    crossed = concat([r[2] for r in results]).astype(bool)
    small = concat([r[3] for r in results])
    check_capped_fraction(concat([r[4] for r in results]), "lambda")

    s12 = MCSummary.from_samples(v12)
    s1 = MCSummary.from_samples(np.where(crossed, 0.0, v12))
    s2 = MCSummary.from_samples(np.where(crossed, v12, 0.0))
    s_vs = MCSummary.from_samples(vs)
    s_lam = MCSummary.from_samples(v12 + vs)

    b = float(surface.boundary_at(t))
    factor = float(spec.diffusion.sigma(b)) / (2.0 * float(h_values(spec, t, b)))
    small_fraction = float(np.mean(small))
    high_variance = small_fraction > HIGH_VARIANCE_FRACTION
    if high_variance:
        logger.warning("Lambda({:.4g}): {:.2%} of capped paths end with rho below the floor", t, small_fraction)
    estimate = LambdaEstimate(
        t=t, V1=s1.mean, V2=s2.mean, intVs=s_vs.mean, se_V1=s1.se, se_V2=s2.se, se_intVs=s_vs.se,
        V1plusV2=s12.mean, se_V1plusV2=s12.se, Lambda=s_lam.mean, se_Lambda=s_lam.se,
        bdot_formula=factor * s_lam.mean, se_bdot=abs(factor) * s_lam.se, n_paths=n_paths,
        dt_path=dt, seed=seed, crossed_fraction=float(np.mean(crossed)),
        small_rho_fraction=small_fraction, high_variance=high_variance,
    )
    logger.info("Lambda({:.4g}) = {:.6g} +- {:.2g}; b_dot = {:.6g} +- {:.2g}", t, estimate.Lambda,
                estimate.se_Lambda, estimate.bdot_formula, estimate.se_bdot)
    return estimate


def _vh_batch(t: float, h: float, path: PitmanPath, fx: PathFunctionals, n_s: int):
    horizon = fx.T1 - t
    n_use = _horizon_steps(path, horizon)
    theta_h, index_h = hitting_time_theta_h(path, fx.curve, t, fx.T1, fx.y2, h)
    log_l, capped = cumulative_log_weight(path, fx.curve, fx.gamma, t, n_use, h=h)
    log_d = cumulative_log_discount(path, fx.curve, fx.R, t, n_use, h=h)
    end = np.full(path.n_paths, horizon / path.dt_path)
    xi = path.xi(h)

    in_b1 = (value_at_index(path.Wbar, end) <= h) & (theta_h >= horizon)
    k_exit = np.minimum(np.ceil(np.where(np.isfinite(index_h), index_h, 0.0)).astype(int), path.n_steps)
    in_b2 = (theta_h < horizon) & (path.Wbar[np.arange(path.n_paths), k_exit] <= h)

    value = np.zeros(path.n_paths)
    if in_b1.any():
        w1 = np.exp(value_at_index(log_l, end) + value_at_index(log_d, end))
        y1_end = fx.curve.c_at(fx.T1) + value_at_index(xi, end)
        value += np.where(in_b1, w1 * fx.w_dot(np.full(path.n_paths, fx.T1), y1_end), 0.0)
    if in_b2.any():
        idx2 = np.where(in_b2, index_h, 0.0)
        w2 = np.exp(value_at_index(log_l, idx2) + value_at_index(log_d, idx2))
        value += np.where(in_b2, w2 * fx.w_dot(t + np.where(in_b2, theta_h, 0.0), fx.y2), 0.0)

    if not fx.spec.time_homogeneous:
        s_nodes = np.linspace(0.0, horizon, n_s + 1)
        weights = np.full(s_nodes.size, s_nodes[1] - s_nodes[0])
        weights[[0, -1]] *= 0.5
        for s, w in zip(s_nodes, weights):
            index = np.full(path.n_paths, s / path.dt_path)
            alive = (value_at_index(path.Wbar, index) <= h) & (theta_h >= s)
            y = fx.curve.c_at(t + s) + value_at_index(xi, index)
            integrand = np.exp(value_at_index(log_l, index) + value_at_index(log_d, index)) * fx.F(t + s, y)
            value += w * np.where(alive, integrand, 0.0)
    if np.any(in_b1 & in_b2):
        raise NumericalFailureError("Exit events overlap on some path", stage="vh")
    return value, in_b1, in_b2, capped


def _check_vh_inputs(t: float, h: float, fx: PathFunctionals) -> None:
    if not 0.0 <= t < fx.T1:
        raise DomainError(f"t={t} must lie in [0, T1)")
    if not h > 0.0 or fx.curve.c_at(t) + h >= fx.y2:
        raise DomainError(f"h={h} must be positive with c(t) + h < y2")


def estimate_Vh(
    t: float,
    h: float,
    paths: Paths,
    surface: ValueSurface,
    curve: BoundaryCurveY,
    spec: ProblemSpec,
    lamperti: Optional[LampertiMap] = None,
    n_s: int = 64,
) -> VhEstimate:
    """Pre-limit functional on the given paths: terminal, upper-edge and running terms.

    Weights and discount run along h + rho - 2 Wbar; the terminal term needs Wbar <= h up to
    T1 - t without reaching y2, the upper-edge term Wbar <= h up to the exit time theta_h.

    Raises:
        DomainError: If h <= 0 or c(t) + h >= y2.
        NumericalFailureError: If too many path weights overflow.
    """
    fx = PathFunctionals(spec, surface, curve, lamperti or lamperti_for(surface))
    _check_vh_inputs(t, h, fx)
    results = [_vh_batch(t, h, path, fx, n_s) for path in _as_list(paths)]
    return _assemble_vh(t, h, results)


def _assemble_vh(t: float, h: float, results) -> VhEstimate:
    check_capped_fraction(concat([r[3] for r in results]), "vh")
    summary = MCSummary.from_samples(concat([r[0] for r in results]))
    return VhEstimate(
        t=t, h=h, value=summary.mean, std_err=summary.se,
        p_B1=float(np.mean(concat([r[1] for r in results]))),
        p_B2=float(np.mean(concat([r[2] for r in results]))),
        n_paths=summary.n,
    )


def estimate_Vh_streamed(
    t: float,
    h: float,
    surface: ValueSurface,
    curve: BoundaryCurveY,
    spec: ProblemSpec,
    n_paths: int,
    dt_path: float,
    seed: int,
    lamperti: Optional[LampertiMap] = None,
    bridge_max: bool = True,
    n_s: int = 64,
    workers: int = 1,
    batch_size: int = 500,
) -> VhEstimate:
    """estimate_Vh over seed-derived batches without holding every path in memory."""
    fx = PathFunctionals(spec, surface, curve, lamperti or lamperti_for(surface))
    _check_vh_inputs(t, h, fx)
    horizon = fx.T1 - t
    n_steps = max(1, int(math.ceil(horizon / dt_path - 1e-9)))
    dt = horizon / n_steps

    def batch(rng: np.random.Generator, n: int, index: int):
        path = sample_pitman_path(n_steps, dt, rng, n, bridge_max, seed, index)
        return _vh_batch(t, h, path, fx, n_s)

    results = run_batches(batch, n_paths, seed, f"vh:{t:.9g}:{h:.9g}", workers, batch_size)
    estimate = _assemble_vh(t, h, results)
    logger.info("V_h({:.4g}, h={:.4g}) = {:.6g} +- {:.2g}", t, h, estimate.value, estimate.std_err)
    return estimate


@dataclass(frozen=True)
class ExpansionRow:
    """One h of the expansion study; ratio is None when Lambda vanishes."""

    h: float
    w_dot: float
    ratio: Optional[float]


@dataclass(frozen=True)
class ExpansionStudy:
    t: float
    Lambda: float
    rows: list
    skipped: bool
    improving: bool
    final_error: Optional[float]
    passed: bool


def expansion_convergence(
    t: float,
    h_list: Iterable[float],
    surface: ValueSurface,
    curve: BoundaryCurveY,
    lamperti: LampertiMap,
    Lambda: float,
    tolerance: float,
) -> ExpansionStudy:
    """Ratios r(h) = w_dot(t, c(t) + h) / (h Lambda) read from the solver surface.

    Args:
        t: Evaluation time.
        h_list: Strictly decreasing offsets in Lamperti units.
        surface: Solved surface with u_dot.
        curve: Rescaled boundary.
        lamperti: Lamperti map.
        Lambda: Monte Carlo Lambda(t).
        tolerance: Allowed |r(h_min) - 1|.

    Returns:
        The study; passes when |r - 1| shrinks from h_max to h_min and ends within tolerance.

    Raises:
        DomainError: If h_list is not strictly decreasing and admissible.
    """
    h_values_ = np.asarray(list(h_list), dtype=float)
    c_t = float(curve.c_at(t))
    if h_values_.size < 2 or np.any(np.diff(h_values_) >= 0) or np.any(h_values_ <= 0):
        raise DomainError("h_list must be positive and strictly decreasing")
    if c_t + h_values_[0] >= lamperti.y2:
        raise DomainError("Largest h reaches the upper edge of the rectangle")
    x = lamperti.f_inv_array(c_t + h_values_)
    w_dot = surface.interp("u_dot", np.full(x.shape, t), x)
    if Lambda == 0.0:
        rows = [ExpansionRow(float(h), float(w), None) for h, w in zip(h_values_, w_dot)]
        return ExpansionStudy(t, Lambda, rows, True, False, None, False)
    ratios = w_dot / (h_values_ * Lambda)
    rows = [ExpansionRow(float(h), float(w), float(r)) for h, w, r in zip(h_values_, w_dot, ratios)]
    first, last = abs(ratios[0] - 1.0), abs(ratios[-1] - 1.0)
    improving = bool(last < first)
    return ExpansionStudy(t, Lambda, rows, False, improving, float(last), improving and last <= tolerance)
