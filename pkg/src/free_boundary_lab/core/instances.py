"""
File: instances.py
Description: Concrete optimal stopping problems: the American put and call under geometric
    Brownian motion and a put with a time-dependent discount rate.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

from typing import Any

import numpy as np

from free_boundary_lab.core.exceptions import ConfigError, DomainError
from free_boundary_lab.core.model import (
    DiffusionSpec,
    DiscountSpec,
    GainSpec,
    Orientation,
    ProblemSpec,
    validate_spec,
)


def _const(value: float, *args) -> np.ndarray:
    shape = np.broadcast(*[np.asarray(a, dtype=float) for a in args]).shape
    return np.full(shape, float(value))


def _gbm_diffusion(drift_rate, drift_rate_t, sigma: float) -> DiffusionSpec:
    return DiffusionSpec(
        mu=lambda t, x: drift_rate(t) * np.asarray(x, dtype=float),
        sigma=lambda x: sigma * np.asarray(x, dtype=float),
        sigma_x=lambda x: _const(sigma, x),
        sigma_xx=lambda x: _const(0.0, x),
        mu_t=lambda t, x: drift_rate_t(t) * np.asarray(x, dtype=float),
        domain_lo=0.0,
        domain_hi=np.inf,
    )


def _linear_gain(K: float, sign: float) -> GainSpec:
    """Smooth branch sign*(x - K) with payoff max(sign*(x - K), 0)."""
    return GainSpec(
        g=lambda t, x: sign * (np.asarray(x, dtype=float) - K) + _const(0.0, t, x),
        g_t=lambda t, x: _const(0.0, t, x),
        g_x=lambda t, x: _const(sign, t, x),
        g_xx=lambda t, x: _const(0.0, t, x),
        g_tx=lambda t, x: _const(0.0, t, x),
        g_txx=lambda t, x: _const(0.0, t, x),
        g_tt=lambda t, x: _const(0.0, t, x),
        payoff=lambda t, x: np.maximum(sign * (np.asarray(x, dtype=float) - K), 0.0) + _const(0.0, t, x),
        kink=K,
        kink_jump=1.0,
        terminal_dc=True,
    )


def _check_positive(**values: float) -> None:
    for name, value in values.items():
        if not value > 0.0:
            raise DomainError(f"{name} must be positive, got {value}")


def american_put_spec(
    K: float, r: float, delta: float, sigma: float, T: float, T1: float, x1: float, x2: float
) -> ProblemSpec:
    """American put under GBM with dividend yield delta; stopping below the boundary.

    Raises:
        DomainError: On invalid parameters or if h >= 0 somewhere on the rectangle.
    """
    _check_positive(K=K, sigma=sigma)
    if r < 0.0 or delta < 0.0:
        raise DomainError("r and delta must be non-negative")
    spec = ProblemSpec(
        diffusion=_gbm_diffusion(lambda t: (r - delta) + 0.0 * np.asarray(t), lambda t: 0.0 * np.asarray(t), sigma),
        gain=_linear_gain(K, -1.0),
        discount=DiscountSpec(r=lambda t, x: _const(r, t, x), r_t=lambda t, x: _const(0.0, t, x)),
        horizon_T=T,
        rect_T1=T1,
        rect_x1=x1,
        rect_x2=x2,
        orientation=Orientation.STOP_BELOW,
        name="put",
        time_homogeneous=True,
        params={"K": K, "r": r, "delta": delta, "sigma": sigma},
    )
    validate_spec(spec)
    return spec


def american_call_spec(
    K: float, r: float, delta: float, sigma: float, T: float, T1: float, x1: float, x2: float
) -> ProblemSpec:
    """American call under GBM with dividend yield delta; stopping above the boundary.

    Raises:
        DomainError: If delta = 0 (never optimal to stop early) or the rectangle is invalid.
    """
    _check_positive(K=K, sigma=sigma)
    if delta <= 0.0:
        raise DomainError("The call needs delta > 0; with delta = 0 early exercise is never optimal")
    if r < 0.0:
        raise DomainError("r must be non-negative")
    spec = ProblemSpec(
        diffusion=_gbm_diffusion(lambda t: (r - delta) + 0.0 * np.asarray(t), lambda t: 0.0 * np.asarray(t), sigma),
        gain=_linear_gain(K, 1.0),
        discount=DiscountSpec(r=lambda t, x: _const(r, t, x), r_t=lambda t, x: _const(0.0, t, x)),
        horizon_T=T,
        rect_T1=T1,
        rect_x1=x1,
        rect_x2=x2,
        orientation=Orientation.STOP_ABOVE,
        name="call",
        time_homogeneous=True,
        params={"K": K, "r": r, "delta": delta, "sigma": sigma},
    )
    validate_spec(spec)
    return spec


def time_inhomogeneous_put_spec(
    K: float, r: float, delta: float, sigma: float, T: float, T1: float, x1: float, x2: float
) -> ProblemSpec:
    """Put whose discount rate and risk-neutral drift grow in time: r(t) = r (1 + t).

    The smooth branch K - x gives h = delta x - r(t) K and h_dot = -r K.
    """
    _check_positive(K=K, sigma=sigma, r=r)
    if delta < 0.0:
        raise DomainError("delta must be non-negative")

    def rate(t):
        return r * (1.0 + np.asarray(t, dtype=float))

    spec = ProblemSpec(
        diffusion=_gbm_diffusion(lambda t: rate(t) - delta, lambda t: r + 0.0 * np.asarray(t), sigma),
        gain=_linear_gain(K, -1.0),
        discount=DiscountSpec(
            r=lambda t, x: rate(t) + _const(0.0, t, x),
            r_t=lambda t, x: _const(r, t, x),
        ),
        horizon_T=T,
        rect_T1=T1,
        rect_x1=x1,
        rect_x2=x2,
        orientation=Orientation.STOP_BELOW,
        name="custom_time_inhomogeneous",
        time_homogeneous=False,
        params={"K": K, "r": r, "delta": delta, "sigma": sigma},
    )
    validate_spec(spec)
    return spec


INSTANCE_BUILDERS = {
    "put": american_put_spec,
    "call": american_call_spec,
    "custom_time_inhomogeneous": time_inhomogeneous_put_spec,
}


def build_problem(problem: Any) -> ProblemSpec:
    """Builds the ProblemSpec described by a ``problem`` config section.

    Args:
        problem: Object with attributes kind, K, r, delta, sigma, T, T1, x1, x2.

    Returns:
        The validated problem specification.

    Raises:
        ConfigError: If the kind is unknown or the parameters do not define a valid instance.
    """
    builder = INSTANCE_BUILDERS.get(problem.kind)
    if builder is None:
        raise ConfigError(f"problem.kind: unknown instance '{problem.kind}'")
    try:
        return builder(
            K=problem.K, r=problem.r, delta=problem.delta, sigma=problem.sigma,
            T=problem.T, T1=problem.T1, x1=problem.x1, x2=problem.x2,
        )
    except DomainError as e:
        raise ConfigError(f"problem: {e}") from e
