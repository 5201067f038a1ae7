"""
File: bessel.py
Description: Pitman-coupled simulation of the 3-D Bessel process and its future infimum,
    the hitting times built on it and the path weights (Girsanov factor, discount).
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from free_boundary_lab.core.exceptions import DomainError, NumericalFailureError

ArrayLike = Union[float, np.ndarray]
CurveFn = Callable[[np.ndarray], np.ndarray]
RateFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

EXPONENT_CAP = 700.0
MAX_CAPPED_FRACTION = 1e-4


@dataclass(frozen=True)
class PitmanPath:
    """A batch of discretized triples (W, Wbar, rho = 2 Wbar - W).

    Arrays have shape (n_paths, n_steps + 1); column k is time k * dt_path. Under Pitman's
    theorem (rho, Wbar) has the joint law of a 3-D Bessel process and its future infimum.
    """

    dt_path: float
    W: np.ndarray
    Wbar: np.ndarray
    rho: np.ndarray
    bridge_max: bool = True
    seed: Optional[int] = None
    substream: Optional[int] = None

    @property
    def n_paths(self) -> int:
        return self.W.shape[0]

    @property
    def n_steps(self) -> int:
        return self.W.shape[1] - 1

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt_path

    @property
    def times(self) -> np.ndarray:
        return self.dt_path * np.arange(self.n_steps + 1)

    def xi(self, h: float) -> np.ndarray:
        """h + rho - 2 Wbar, i.e. h - W."""
        return h + self.rho - 2.0 * self.Wbar

    def coarsen(self, factor: int) -> "PitmanPath":
        """Same paths observed every ``factor`` steps (the running maximum stays exact)."""
        if self.n_steps % factor:
            raise DomainError(f"n_steps={self.n_steps} is not a multiple of {factor}")
        W = self.W[:, ::factor]
        Wbar = self.Wbar[:, ::factor]
        return PitmanPath(self.dt_path * factor, W, Wbar, 2.0 * Wbar - W, self.bridge_max, self.seed, self.substream)


def sample_pitman_path(
    n_steps: int,
    dt_path: float,
    rng: np.random.Generator,
    n_paths: int = 1,
    bridge_max: bool = True,
    seed: Optional[int] = None,
    substream: Optional[int] = None,
) -> PitmanPath:
    """Simulates W by Gaussian increments and its running maximum.

    With ``bridge_max`` the maximum over each step is drawn from the exact Brownian-bridge law
    M = (a + b + sqrt((b - a)^2 - 2 dt log U)) / 2, so (rho, Wbar) has the exact joint law at
    the grid times; without it the discrete maximum is used.

    Args:
        n_steps: Number of steps.
        dt_path: Step size.
        rng: Generator owned by the caller.
        n_paths: Batch size.
        bridge_max: Sample per-step maxima from the bridge law.
        seed: Recorded on the result.
        substream: Recorded on the result.

    Returns:
        The simulated batch.
    """
    increments = rng.standard_normal((n_paths, n_steps)) * math.sqrt(dt_path)
    W = np.zeros((n_paths, n_steps + 1))
    np.cumsum(increments, axis=1, out=W[:, 1:])
    a, b = W[:, :-1], W[:, 1:]
    if bridge_max:
        log_u = np.log1p(-rng.random((n_paths, n_steps)))
        step_max = 0.5 * (a + b + np.sqrt((b - a) ** 2 - 2.0 * dt_path * log_u))
    else:
        step_max = np.maximum(a, b)
    Wbar = np.zeros_like(W)
    np.maximum.accumulate(step_max, axis=1, out=Wbar[:, 1:])
    np.maximum(Wbar, 0.0, out=Wbar)
    return PitmanPath(dt_path, W, Wbar, 2.0 * Wbar - W, bridge_max, seed, substream)


@dataclass(frozen=True)
class BoundaryCurveY:
    """Boundary in Lamperti coordinates, c(t) = f(b(t)), with its smoothed slope."""

    t_nodes: np.ndarray
    c: np.ndarray
    c_dot: np.ndarray
    lipschitz_const: float

    @classmethod
    def from_arrays(cls, t_nodes, c, c_dot=None) -> "BoundaryCurveY":
        t_nodes = np.asarray(t_nodes, dtype=float)
        c = np.asarray(c, dtype=float)
        c_dot = np.gradient(c, t_nodes) if c_dot is None else np.asarray(c_dot, dtype=float)
        return cls(t_nodes, c, c_dot, float(np.max(np.abs(c_dot))))

    def c_at(self, t: ArrayLike) -> np.ndarray:
        return np.interp(t, self.t_nodes, self.c)

    def c_dot_at(self, t: ArrayLike) -> np.ndarray:
        return np.interp(t, self.t_nodes, self.c_dot)


def _first_crossing(values: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First column where values >= level, refined by linear interpolation.

    Returns:
        Fractional index (inf if never), crossed flag and the integer first index.
    """
    above = values >= level
    crossed = above.any(axis=1)
    k = np.argmax(above, axis=1)
    index = k.astype(float)
    rows = np.nonzero(crossed & (k > 0))[0]
    if rows.size:
        prev = values[rows, k[rows] - 1]
        cur = values[rows, k[rows]]
        index[rows] = k[rows] - 1 + (level - prev) / (cur - prev)
    index[~crossed] = np.inf
    return index, crossed, np.where(crossed, k, -1)


def value_at_index(values: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Row-wise linear interpolation of ``values`` at fractional column ``index``."""
    index = np.broadcast_to(np.asarray(index, dtype=float), (values.shape[0],))
    last = values.shape[1] - 1
    idx = np.clip(index, 0.0, last)
    k = np.minimum(np.floor(idx).astype(int), max(last - 1, 0))
    frac = idx - k
    rows = np.arange(values.shape[0])
    if last == 0:
        return values[:, 0].copy()
    return values[rows, k] * (1.0 - frac) + values[rows, k + 1] * frac


def _steps_for(path: PitmanPath, horizon: float) -> int:
    n = int(math.ceil(horizon / path.dt_path - 1e-9))
    if n > path.n_steps:
        raise DomainError(f"Path horizon {path.horizon:.6g} is shorter than {horizon:.6g}")
    return n


@dataclass(frozen=True)
class ThetaResult:
    """Exit time of rho + c from below y2, capped at the rectangle's time edge."""

    theta: np.ndarray
    index: np.ndarray
    crossed: np.ndarray
    rho_theta: np.ndarray


def hitting_time_theta(path: PitmanPath, curve: BoundaryCurveY, t: float, T1: float, y2: float) -> ThetaResult:
    """theta = inf{s: rho_s + c(t + s) >= y2} capped at T1 - t.

    ``crossed`` marks {theta < T1 - t}; on those paths rho_theta = y2 - c(t + theta).

    Raises:
        DomainError: If t >= T1 or the path is too short.
    """
    if not t < T1:
        raise DomainError(f"t={t} must be below T1={T1}")
    horizon = T1 - t
    n_use = _steps_for(path, horizon)
    s = np.minimum(path.dt_path * np.arange(n_use + 1), horizon)
    cap_index = horizon / path.dt_path
    if not np.isfinite(y2):
        index = np.full(path.n_paths, cap_index)
        crossed = np.zeros(path.n_paths, dtype=bool)
    else:
        values = path.rho[:, : n_use + 1] + curve.c_at(t + s)[None, :]
        index, crossed, _ = _first_crossing(values, y2)
        crossed = crossed & (index < cap_index)
        index = np.where(crossed, index, cap_index)
    theta = np.minimum(index * path.dt_path, horizon)
    rho_theta = np.where(crossed, y2 - curve.c_at(t + theta), value_at_index(path.rho, index))
    return ThetaResult(theta, index, crossed, rho_theta)


def hitting_time_theta_h(
    path: PitmanPath, curve: BoundaryCurveY, t: float, T1: float, y2: float, h: float
) -> tuple[np.ndarray, np.ndarray]:
    """theta_h = inf{s: h + rho_s - 2 Wbar_s + c((t + s) ^ T1) >= y2}, uncapped.

    Returns:
        (theta_h, fractional index); +inf where no crossing occurs within the path horizon.

    Raises:
        DomainError: If h < 0.
    """
    if h < 0.0:
        raise DomainError(f"h must be non-negative, got {h}")
    s = path.times
    values = path.xi(h) + curve.c_at(np.minimum(t + s, T1))[None, :]
    index, _, _ = _first_crossing(values, y2)
    return index * path.dt_path, index


@dataclass(frozen=True)
class TauPair:
    """First times rho + phi reaches -h and +h (time, integer index; inf / -1 if never)."""

    tau_minus: np.ndarray
    tau_plus: np.ndarray
    k_minus: np.ndarray
    k_plus: np.ndarray


def tau_pm_h(path: PitmanPath, phi: CurveFn, h: float) -> TauPair:
    """First passage times of rho_s + phi(s) above -h and above +h.

    Raises:
        DomainError: If phi(0) >= -h.
    """
    s = path.times
    phi_s = np.asarray(phi(s), dtype=float)
    if not phi_s[0] < -h:
        raise DomainError(f"Need phi(0) < -h, got phi(0)={phi_s[0]}, h={h}")
    values = path.rho + phi_s[None, :]
    i_minus, _, k_minus = _first_crossing(values, -h)
    i_plus, _, k_plus = _first_crossing(values, h)
    return TauPair(i_minus * path.dt_path, i_plus * path.dt_path, k_minus, k_plus)


def sigma_beta_violations(path: PitmanPath, phi: CurveFn, h: float, c_phi: float) -> tuple[int, int]:
    """Counts paths where the +h passage comes later than tau^{-h} + sigma^beta_{2h}.

    beta restarts at the -h passage with increments d(rho) - ds / rho; sigma^beta_{2h} is its
    first index with beta >= 2h + c_phi * s. Indices are compared on the grid.

    Returns:
        (number of violations, number of paths where both passages are observed).
    """
    pair = tau_pm_h(path, phi, h)
    dt = path.dt_path
    violations = tested = 0
    for row in np.nonzero(pair.k_minus >= 0)[0]:
        k0 = int(pair.k_minus[row])
        rho = path.rho[row, k0:]
        if rho.size < 2:
            continue
        d_beta = np.diff(rho) - dt / rho[:-1]
        beta = np.concatenate(([0.0], np.cumsum(d_beta)))
        target = 2.0 * h + c_phi * dt * np.arange(beta.size)
        hit = np.nonzero(beta >= target)[0]
        if hit.size == 0:
            continue
        tested += 1
        if pair.k_plus[row] < 0 or pair.k_plus[row] > k0 + hit[0]:
            violations += 1
    return violations, tested


@dataclass(frozen=True)
class WeightResult:
    """Path weights at the requested stopping index and the overflow flags."""

    value: np.ndarray
    capped: np.ndarray


def _shifted_state(path: PitmanPath, curve: BoundaryCurveY, t: float, n_use: int, h: Optional[float]):
    s = path.times[: n_use + 1]
    xi = path.rho[:, : n_use + 1] if h is None else path.xi(h)[:, : n_use + 1]
    return s, xi, curve.c_at(t + s)


def cumulative_log_weight(
    path: PitmanPath,
    curve: BoundaryCurveY,
    gamma_fn: RateFn,
    t: float,
    n_use: int,
    h: Optional[float] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Running exponent sum gamma_{t,v} d(xi) - 1/2 sum gamma_{t,v}^2 dv, left-point.

    gamma_{t,v}(xi) = gamma(t + v, c(t + v) + xi) - c_dot(t + v); xi is rho, or h + rho - 2 Wbar
    when ``h`` is given.

    Returns:
        (exponent array of shape (n_paths, n_use + 1) capped at 700, per-path capped flag).
    """
    s, xi, c = _shifted_state(path, curve, t, n_use, h)
    shift = curve.c_dot_at(t + s)
    g = np.asarray(gamma_fn((t + s)[None, :-1], c[None, :-1] + xi[:, :-1]), dtype=float) - shift[None, :-1]
    increments = g * np.diff(xi, axis=1) - 0.5 * g**2 * path.dt_path
    exponent = np.zeros_like(xi)
    np.cumsum(increments, axis=1, out=exponent[:, 1:])
    capped = np.any(exponent > EXPONENT_CAP, axis=1)
    np.minimum(exponent, EXPONENT_CAP, out=exponent)
    return exponent, capped


def cumulative_log_discount(
    path: PitmanPath,
    curve: BoundaryCurveY,
    R_fn: RateFn,
    t: float,
    n_use: int,
    h: Optional[float] = None,
) -> np.ndarray:
    """-int_0^s R(t + v, c(t + v) + xi_v) dv by the trapezoid rule, per column."""
    s, xi, c = _shifted_state(path, curve, t, n_use, h)
    rate = np.broadcast_to(np.asarray(R_fn((t + s)[None, :], c[None, :] + xi), dtype=float), xi.shape)
    out = np.zeros_like(xi)
    np.cumsum(-0.5 * (rate[:, 1:] + rate[:, :-1]) * path.dt_path, axis=1, out=out[:, 1:])
    return out


def weight_L(
    path: PitmanPath,
    curve: BoundaryCurveY,
    gamma_fn: RateFn,
    t: float,
    s_stop: ArrayLike,
    h: Optional[float] = None,
) -> WeightResult:
    """Stochastic exponential L_{t, s_stop} along each path.

    Args:
        path: Path batch.
        curve: Boundary in Lamperti coordinates (supplies c and c_dot).
        gamma_fn: gamma(t, y), vectorized.
        t: Start time.
        s_stop: Stopping time(s), scalar or one per path.
        h: Evaluate along h + rho - 2 Wbar instead of rho.

    Returns:
        Weights and per-path overflow flags.
    """
    s_stop = np.broadcast_to(np.asarray(s_stop, dtype=float), (path.n_paths,))
    n_use = _steps_for(path, float(np.max(s_stop)))
    exponent, capped = cumulative_log_weight(path, curve, gamma_fn, t, n_use, h)
    return WeightResult(np.exp(value_at_index(exponent, s_stop / path.dt_path)), capped)


def discount_D(
    path: PitmanPath,
    curve: BoundaryCurveY,
    R_fn: RateFn,
    t: float,
    s_stop: ArrayLike,
    h: Optional[float] = None,
) -> np.ndarray:
    """Discount factor D_{t, s_stop} = exp(-int R) along each path."""
    s_stop = np.broadcast_to(np.asarray(s_stop, dtype=float), (path.n_paths,))
    n_use = _steps_for(path, float(np.max(s_stop)))
    log_d = cumulative_log_discount(path, curve, R_fn, t, n_use, h)
    return np.exp(value_at_index(log_d, s_stop / path.dt_path))


def check_capped_fraction(capped: np.ndarray, stage: str) -> float:
    """Raises if more than 0.01% of the paths hit the exponent cap.

    Raises:
        NumericalFailureError: When the capped fraction exceeds the limit.
    """
    fraction = float(np.mean(capped)) if np.size(capped) else 0.0
    if fraction > MAX_CAPPED_FRACTION:
        raise NumericalFailureError(
            f"{fraction:.3%} of the path weights overflowed the exponent cap", stage=stage
        )
    return fraction


def conditional_J_cdf(u: ArrayLike, y: ArrayLike) -> ArrayLike:
    """P(J <= u | rho = y) = min(u, y) / y for u >= 0."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    value = np.clip(u, 0.0, None) / y
    value = np.minimum(value, 1.0)
    return float(value) if value.ndim == 0 else value


def modulus_oracle(n_paths: int, t: float, rng: np.random.Generator) -> np.ndarray:
    """|B_t| for a 3-D Brownian motion (exact Bessel marginal)."""
    return np.linalg.norm(rng.standard_normal((n_paths, 3)) * math.sqrt(t), axis=1)


def bessel_sde_oracle(n_paths: int, t: float, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Euler scheme for d rho = rho^{-1} ds + d beta started with an exact first step."""
    dt = t / n_steps
    rho = modulus_oracle(n_paths, dt, rng)
    for _ in range(n_steps - 1):
        rho = np.abs(rho + dt / rho + math.sqrt(dt) * rng.standard_normal(n_paths))
    return rho
