"""
File: model.py
Description: Optimal stopping problem data (diffusion, gain, discount, rectangle) and the
    analytically derived quantities h, H, the Lamperti map, gamma and the scale function.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from loguru import logger
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from free_boundary_lab.core.exceptions import DomainError

ArrayLike = Union[float, np.ndarray]
SpaceFn = Callable[[ArrayLike], ArrayLike]
SpaceTimeFn = Callable[[ArrayLike, ArrayLike], ArrayLike]

# Slack used when deciding whether a point sits on the closed rectangle.
_RECT_SLACK = 1e-12


class Orientation(str, enum.Enum):
    """Side of the boundary on which stopping is optimal."""

    STOP_BELOW = "stop-below"
    STOP_ABOVE = "stop-above"


@dataclass(frozen=True)
class DiffusionSpec:
    """Coefficients of dX = mu(t, X) dt + sigma(X) dB on the interval (domain_lo, domain_hi)."""

    mu: SpaceTimeFn
    sigma: SpaceFn
    sigma_x: SpaceFn
    sigma_xx: SpaceFn
    mu_t: SpaceTimeFn
    domain_lo: float = -np.inf
    domain_hi: float = np.inf


@dataclass(frozen=True)
class GainSpec:
    """Gain function and its analytic derivatives.

    ``g`` is the smooth branch of the payoff that is valid on the whole rectangle; ``payoff``
    is the obstacle enforced by the solver and defaults to ``g``. For the put and the call
    they agree on the stopping side of the boundary and differ beyond the strike.
    """

    g: SpaceTimeFn
    g_t: Optional[SpaceTimeFn] = None
    g_x: Optional[SpaceTimeFn] = None
    g_xx: Optional[SpaceTimeFn] = None
    g_tx: Optional[SpaceTimeFn] = None
    g_txx: Optional[SpaceTimeFn] = None
    g_tt: Optional[SpaceTimeFn] = None
    payoff: Optional[SpaceTimeFn] = None
    kink: Optional[float] = None
    kink_jump: float = 0.0
    terminal_dc: bool = True

    def obstacle(self, t: ArrayLike, x: ArrayLike) -> np.ndarray:
        """Evaluates the obstacle (payoff) used by the solver."""
        fn = self.payoff if self.payoff is not None else self.g
        return np.asarray(fn(t, x), dtype=float)

    def missing_derivatives(self) -> list[str]:
        """Names of derivative callables that were not supplied."""
        names = ("g_t", "g_x", "g_xx", "g_tx", "g_txx", "g_tt")
        return [name for name in names if getattr(self, name) is None]


@dataclass(frozen=True)
class DiscountSpec:
    """Discount rate r(t, x) and its time derivative."""

    r: SpaceTimeFn
    r_t: SpaceTimeFn


@dataclass(frozen=True)
class ProblemSpec:
    """A complete optimal stopping problem with its working rectangle (0, T1) x (x1, x2)."""

    diffusion: DiffusionSpec
    gain: GainSpec
    discount: DiscountSpec
    horizon_T: float
    rect_T1: float
    rect_x1: float
    rect_x2: float
    orientation: Orientation = Orientation.STOP_BELOW
    name: str = "custom"
    time_homogeneous: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.rect_T1 < self.horizon_T:
            raise DomainError(
                f"Need 0 < T1 < T, got T1={self.rect_T1}, T={self.horizon_T}"
            )
        lo, hi = self.diffusion.domain_lo, self.diffusion.domain_hi
        if not lo < self.rect_x1 < self.rect_x2 < hi:
            raise DomainError(
                f"Need domain_lo < x1 < x2 < domain_hi, got {lo} < {self.rect_x1} < "
                f"{self.rect_x2} < {hi}"
            )

    @property
    def stop_below(self) -> bool:
        return self.orientation == Orientation.STOP_BELOW

    def contains(self, t: ArrayLike, x: ArrayLike) -> bool:
        """True when every (t, x) lies in the closed rectangle."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        span = self.rect_x2 - self.rect_x1
        ok_t = (t >= -_RECT_SLACK) & (t <= self.rect_T1 * (1.0 + _RECT_SLACK))
        ok_x = (x >= self.rect_x1 - _RECT_SLACK * span) & (x <= self.rect_x2 + _RECT_SLACK * span)
        return bool(np.all(ok_t & ok_x))


def _output(value: np.ndarray) -> ArrayLike:
    value = np.asarray(value, dtype=float)
    return float(value) if value.ndim == 0 else value


def _require_rectangle(spec: ProblemSpec, t: ArrayLike, x: ArrayLike) -> None:
    if not spec.contains(t, x):
        raise DomainError(
            f"Point(s) outside the closed rectangle [0, {spec.rect_T1}] x "
            f"[{spec.rect_x1}, {spec.rect_x2}]"
        )


def h_values(spec: ProblemSpec, t: ArrayLike, x: ArrayLike) -> np.ndarray:
    """h = g_t + (sigma^2/2) g_xx + mu g_x - r g, without the rectangle check."""
    gain, diff = spec.gain, spec.diffusion
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    sig = np.asarray(diff.sigma(x), dtype=float)
    return (
        np.asarray(gain.g_t(t, x))
        + 0.5 * sig**2 * np.asarray(gain.g_xx(t, x))
        + np.asarray(diff.mu(t, x)) * np.asarray(gain.g_x(t, x))
        - np.asarray(spec.discount.r(t, x)) * np.asarray(gain.g(t, x))
    )


def hdot_values(spec: ProblemSpec, t: ArrayLike, x: ArrayLike) -> np.ndarray:
    """Time derivative of h composed from the analytic derivatives."""
    gain, diff, disc = spec.gain, spec.diffusion, spec.discount
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    sig = np.asarray(diff.sigma(x), dtype=float)
    return (
        np.asarray(gain.g_tt(t, x))
        + 0.5 * sig**2 * np.asarray(gain.g_txx(t, x))
        + np.asarray(diff.mu_t(t, x)) * np.asarray(gain.g_x(t, x))
        + np.asarray(diff.mu(t, x)) * np.asarray(gain.g_tx(t, x))
        - np.asarray(disc.r_t(t, x)) * np.asarray(gain.g(t, x))
        - np.asarray(disc.r(t, x)) * np.asarray(gain.g_t(t, x))
    )


def h_fn(spec: ProblemSpec, t: ArrayLike, x: ArrayLike) -> ArrayLike:
    """Evaluates h(t, x) on the closed rectangle.

    Args:
        spec: Problem specification.
        t: Time(s) in [0, T1].
        x: State(s) in [x1, x2].

    Returns:
        h at the requested point(s).

    Raises:
        DomainError: If any point lies outside the closed rectangle.
    """
    _require_rectangle(spec, t, x)
    return _output(h_values(spec, t, x))


def bigH_values(
    spec: ProblemSpec, t: ArrayLike, x: ArrayLike, u_val: ArrayLike, u_x_val: ArrayLike
) -> np.ndarray:
    """H = h_dot + mu_t u_x - r_t u, without the rectangle check."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    return (
        hdot_values(spec, t, x)
        + np.asarray(spec.diffusion.mu_t(t, x)) * np.asarray(u_x_val, dtype=float)
        - np.asarray(spec.discount.r_t(t, x)) * np.asarray(u_val, dtype=float)
    )


def bigH_fn(
    spec: ProblemSpec, t: ArrayLike, x: ArrayLike, u_val: ArrayLike, u_x_val: ArrayLike
) -> ArrayLike:
    """Evaluates the source H(t, x) of the u_dot equation on the closed rectangle.

    Args:
        spec: Problem specification.
        t: Time(s) in [0, T1].
        x: State(s) in [x1, x2].
        u_val: u = v - g at (t, x).
        u_x_val: u_x at (t, x).

    Returns:
        H at the requested point(s).

    Raises:
        DomainError: If any point lies outside the closed rectangle.
    """
    _require_rectangle(spec, t, x)
    return _output(bigH_values(spec, t, x, u_val, u_x_val))


class LampertiMap:
    """The map f(x) = int_{c0}^x dz / sigma(z) and its inverse.

    Scalar evaluations are exact (adaptive quadrature, bracketed root finding). Vectorized
    evaluations used on path batches go through cubic-spline tables built from the same
    quadrature on [table_lo, table_hi].
    """

    def __init__(
        self,
        diffusion: DiffusionSpec,
        x1: float,
        x2: float,
        ref_point: Optional[float] = None,
        table_lo: Optional[float] = None,
        table_hi: Optional[float] = None,
        n_table: int = 2049,
    ):
        self.diffusion = diffusion
        self.x1 = float(x1)
        self.x2 = float(x2)
        self.ref_point = float(x1 if ref_point is None else ref_point)
        self.table_lo = float(x1 if table_lo is None else table_lo)
        self.table_hi = float(x2 if table_hi is None else table_hi)

        x_tab = np.linspace(self.table_lo, self.table_hi, n_table)
        sig = np.asarray(diffusion.sigma(x_tab), dtype=float)
        if np.any(sig <= 0.0) or not np.all(np.isfinite(sig)):
            raise DomainError("sigma must be finite and strictly positive on the Lamperti table")

        pieces = [self._integral(a, b) for a, b in zip(x_tab[:-1], x_tab[1:])]
        y_tab = np.concatenate(([0.0], np.cumsum(pieces))) - self._integral(self.table_lo, self.ref_point)
        self._x_tab = x_tab
        self._y_tab = y_tab
        self._forward = CubicSpline(x_tab, y_tab)
        self._inverse = CubicSpline(y_tab, x_tab)
        self.y1 = self.f(self.x1)
        self.y2 = self.f(self.x2)
        logger.debug(
            "Lamperti map on [{:.4g}, {:.4g}]: y1={:.6g}, y2={:.6g}", self.table_lo,
            self.table_hi, self.y1, self.y2,
        )

    def _integral(self, a: float, b: float) -> float:
        value, _ = quad(lambda z: 1.0 / float(self.diffusion.sigma(z)), a, b, epsabs=1e-12, epsrel=1e-12, limit=200)
        return value

    def f(self, x: ArrayLike) -> ArrayLike:
        """Exact f(x) by adaptive quadrature."""
        if np.ndim(x) == 0:
            return self._integral(self.ref_point, float(x))
        return np.array([self._integral(self.ref_point, float(v)) for v in np.ravel(x)]).reshape(np.shape(x))

    def _f_inv_scalar(self, y: float) -> float:
        if y < self._y_tab[0] or y > self._y_tab[-1]:
            raise DomainError(f"y={y} outside the Lamperti table range [{self._y_tab[0]}, {self._y_tab[-1]}]")
        k = int(np.clip(np.searchsorted(self._y_tab, y), 1, len(self._y_tab) - 1))
        lo, hi = self._x_tab[k - 1], self._x_tab[k]
        if y == self._y_tab[k - 1]:
            return float(lo)
        if y == self._y_tab[k]:
            return float(hi)
        y_lo = self._y_tab[k - 1]
        # Integrate from the bracket start so each evaluation is a short quadrature.
        return brentq(
            lambda x: y_lo + self._integral(lo, x) - y, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps
        )

    def f_inv(self, y: ArrayLike) -> ArrayLike:
        """Exact inverse by bracketed root finding."""
        if np.ndim(y) == 0:
            return self._f_inv_scalar(float(y))
        return np.array([self._f_inv_scalar(float(v)) for v in np.ravel(y)]).reshape(np.shape(y))

    def f_array(self, x: np.ndarray) -> np.ndarray:
        """Spline evaluation of f for large arrays."""
        return self._forward(np.asarray(x, dtype=float))

    def f_inv_array(self, y: np.ndarray) -> np.ndarray:
        """Spline evaluation of the inverse; y is clamped to the table range."""
        y = np.clip(np.asarray(y, dtype=float), self._y_tab[0], self._y_tab[-1])
        return self._inverse(y)


def gamma_fn(spec: ProblemSpec, lamperti: LampertiMap, t: ArrayLike, y: ArrayLike) -> ArrayLike:
    """Drift of the Lamperti-transformed process, clamped to [y1, y2] in y.

    Args:
        spec: Problem specification.
        lamperti: Lamperti map of ``spec.diffusion``.
        t: Time(s).
        y: Rescaled state(s); values outside [y1, y2] take the boundary value.

    Returns:
        mu(t, x)/sigma(x) - sigma_x(x)/2 with x = f_inv(clamp(y)).
    """
    y_c = np.clip(np.asarray(y, dtype=float), lamperti.y1, lamperti.y2)
    x = lamperti.f_inv_array(y_c)
    x = np.clip(x, spec.rect_x1, spec.rect_x2)
    diff = spec.diffusion
    sig = np.asarray(diff.sigma(x), dtype=float)
    value = np.asarray(diff.mu(t, x), dtype=float) / sig - 0.5 * np.asarray(diff.sigma_x(x), dtype=float)
    return _output(value)


def _require_homogeneous(spec: ProblemSpec) -> None:
    if not spec.time_homogeneous:
        raise DomainError("The scale function needs a time-homogeneous drift")


def scale_density(spec: ProblemSpec, x: ArrayLike, anchor: Optional[float] = None) -> ArrayLike:
    """S'(x) = exp(-int_anchor^x 2 mu / sigma^2)."""
    _require_homogeneous(spec)
    anchor = spec.rect_x1 if anchor is None else anchor
    diff = spec.diffusion

    def one(xv: float) -> float:
        exponent, _ = quad(
            lambda z: 2.0 * float(diff.mu(0.0, z)) / float(diff.sigma(z)) ** 2,
            anchor, xv, epsabs=1e-13, epsrel=1e-12,
        )
        return float(np.exp(-exponent))

    if np.ndim(x) == 0:
        return one(float(x))
    return np.array([one(float(v)) for v in np.ravel(x)]).reshape(np.shape(x))


def scale_function(spec: ProblemSpec, x: ArrayLike, anchor: Optional[float] = None) -> ArrayLike:
    """Scale function S anchored at x1 (S(x1) = 0).

    Args:
        spec: Time-homogeneous problem specification.
        x: State(s) in [x1, x2].
        anchor: Anchor point, x1 by default.

    Returns:
        S(x) = int_anchor^x S'(z) dz.

    Raises:
        DomainError: If the spec is time-inhomogeneous.
    """
    _require_homogeneous(spec)
    anchor = spec.rect_x1 if anchor is None else anchor

    def one(xv: float) -> float:
        value, _ = quad(lambda z: scale_density(spec, z, anchor), anchor, xv, epsabs=1e-13, epsrel=1e-12)
        return value

    if np.ndim(x) == 0:
        return one(float(x))
    return np.array([one(float(v)) for v in np.ravel(x)]).reshape(np.shape(x))


def derivative_consistency(
    spec: ProblemSpec, n_points: int = 7, step: float = 1e-5
) -> dict[str, float]:
    """Worst relative mismatch between each analytic derivative and central differences.

    The comparison runs on an ``n_points`` x ``n_points`` interior sampling of the rectangle.
    Relative errors are measured against max(|analytic|, |fd|, 1).
    """
    gain, diff, disc = spec.gain, spec.diffusion, spec.discount
    missing = gain.missing_derivatives()
    if missing:
        raise DomainError(f"Gain derivatives not supplied: {', '.join(missing)}")

    ts = np.linspace(step * 10, spec.rect_T1 - step * 10, n_points)
    xs = np.linspace(spec.rect_x1, spec.rect_x2, n_points)
    T, X = np.meshgrid(ts, xs, indexing="ij")

    def d_t(fn):
        return (np.asarray(fn(T + step, X)) - np.asarray(fn(T - step, X))) / (2 * step)

    def d_x(fn):
        return (np.asarray(fn(T, X + step)) - np.asarray(fn(T, X - step))) / (2 * step)

    def d_x1(fn):
        return (np.asarray(fn(X + step)) - np.asarray(fn(X - step))) / (2 * step)

    def rel(analytic, fd):
        analytic = np.broadcast_to(np.asarray(analytic, dtype=float), T.shape)
        fd = np.broadcast_to(np.asarray(fd, dtype=float), T.shape)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1.0)
        return float(np.max(np.abs(analytic - fd) / scale))

    return {
        "sigma_x": rel(diff.sigma_x(X), d_x1(diff.sigma)),
        "sigma_xx": rel(diff.sigma_xx(X), d_x1(diff.sigma_x)),
        "mu_t": rel(diff.mu_t(T, X), d_t(diff.mu)),
        "g_t": rel(gain.g_t(T, X), d_t(gain.g)),
        "g_x": rel(gain.g_x(T, X), d_x(gain.g)),
        "g_xx": rel(gain.g_xx(T, X), d_x(gain.g_x)),
        "g_tx": rel(gain.g_tx(T, X), d_x(gain.g_t)),
        "g_txx": rel(gain.g_txx(T, X), d_x(gain.g_tx)),
        "g_tt": rel(gain.g_tt(T, X), d_t(gain.g_t)),
        "r_t": rel(disc.r_t(T, X), d_t(disc.r)),
    }


def validate_spec(spec: ProblemSpec, n_samples: int = 50, rel_tol: float = 1e-6) -> None:
    """Checks sigma > 0, h < 0 on a sampling of the closed rectangle and derivative consistency.

    Raises:
        DomainError: If any check fails.
    """
    ts = np.linspace(0.0, spec.rect_T1, n_samples)
    xs = np.linspace(spec.rect_x1, spec.rect_x2, n_samples)
    T, X = np.meshgrid(ts, xs, indexing="ij")

    sig = np.asarray(spec.diffusion.sigma(X), dtype=float)
    if np.any(sig <= 0.0):
        raise DomainError(f"{spec.name}: sigma must be strictly positive on the rectangle")

    h = np.broadcast_to(h_values(spec, T, X), T.shape)
    if np.any(h >= 0.0):
        i, j = np.unravel_index(int(np.argmax(h)), h.shape)
        raise DomainError(
            f"{spec.name}: h must be negative on the rectangle; h({ts[i]:.4g}, {xs[j]:.4g}) = {h[i, j]:.4g}"
        )

    errors = derivative_consistency(spec)
    worst = max(errors, key=errors.get)
    if errors[worst] > rel_tol:
        raise DomainError(
            f"{spec.name}: derivative {worst} disagrees with finite differences "
            f"(relative error {errors[worst]:.3g})"
        )
    logger.debug("{} validated: max h = {:.4g}, worst derivative mismatch {}={:.2g}",
                 spec.name, float(np.max(h)), worst, errors[worst])
