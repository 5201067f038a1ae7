"""
File: stefan.py
Description: Checks that the time derivative of the value function and the free boundary solve
    the Stefan problem: interior equation, boundary value, velocity condition and the weak
    terminal condition against the measure Sigma = (L g - r g)(T, dz).
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.integrate import quad, trapezoid

from free_boundary_lab.core.exceptions import ConfigError
from free_boundary_lab.core.model import ProblemSpec, h_values
from free_boundary_lab.core.pde_solver import ValueSurface, solve_terminal_layer, terminal_boundary


@dataclass(frozen=True)
class StefanData:
    """Data of the Stefan problem attached to a solved surface.

    psi and the boundary coefficients are callables; Sigma is split into its absolutely
    continuous part (density on [support_lo, support_hi]) and exact Dirac atoms.
    """

    psi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    phi: Callable[[np.ndarray], np.ndarray]
    eta: Callable[[np.ndarray], np.ndarray]
    nu: Callable[[np.ndarray], np.ndarray]
    sigma_density: Optional[Callable[[np.ndarray], np.ndarray]]
    sigma_atoms: list
    support_lo: float
    support_hi: float
    stop_below: bool


@dataclass(frozen=True)
class ResidualStats:
    max: float
    l2: float
    n: int

    @classmethod
    def of(cls, values: np.ndarray) -> "ResidualStats":
        values = np.abs(np.asarray(values, dtype=float).ravel())
        if values.size == 0:
            return cls(math.nan, math.nan, 0)
        return cls(float(values.max()), float(math.sqrt(math.fsum(values**2) / values.size)), int(values.size))


@dataclass(frozen=True)
class StefanRow:
    """One machine-readable row: condition, t or test-function id, residual, budget, verdict."""

    condition: str
    ident: str
    residual: float
    budget: float
    verdict: str


@dataclass
class StefanReport:
    pde_residual_stats: dict = field(default_factory=dict)
    bc_residual_stats: dict = field(default_factory=dict)
    ode_residual_stats: dict = field(default_factory=dict)
    terminal_tests: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v == "PASS" for v in self.verdicts.values() if v != "INFO")


def stefan_data_for(spec: ProblemSpec, surface: ValueSurface) -> StefanData:
    """Assembles psi, phi, eta, nu and Sigma for a solved surface.

    Args:
        spec: Problem specification with every analytic derivative supplied.
        surface: Surface with the boundary and v_x filled.

    Returns:
        The Stefan data.

    Raises:
        ConfigError: If derivatives are missing or g(T, .) is not declared a difference of
            convex functions.
    """
    missing = spec.gain.missing_derivatives()
    if missing:
        raise ConfigError(f"Stefan data need the gain derivatives {', '.join(missing)}")
    if not spec.gain.terminal_dc:
        raise ConfigError("Stefan data need g(T, .) to be a difference of convex functions")
    diff, gain, disc = spec.diffusion, spec.gain, spec.discount
    surface.require("v_x")
    T = spec.horizon_T

    def psi(t, x):
        return (np.asarray(diff.mu_t(t, x)) * surface.interp("v_x", t, x)
                - np.asarray(disc.r_t(t, x)) * surface.interp("v", t, x))

    def phi(t):
        return np.asarray(gain.g_t(t, surface.boundary_at(t)), dtype=float)

    def eta(t):
        b = surface.boundary_at(t)
        return -np.asarray(diff.sigma(b)) ** 2 / (2.0 * h_values(spec, t, b))

    def nu(t):
        b = surface.boundary_at(t)
        return -np.asarray(diff.sigma(b)) ** 2 * np.asarray(gain.g_tx(t, b)) / (2.0 * h_values(spec, t, b))

    b_T = terminal_boundary(spec)
    kink = gain.kink
    atoms = []
    if kink is not None and gain.kink_jump:
        atoms.append((float(kink), 0.5 * float(diff.sigma(kink)) ** 2 * gain.kink_jump))
    if spec.stop_below:
        lo, hi = b_T, (kink if kink is not None else surface.grid.x_nodes[-1])
    else:
        lo, hi = (kink if kink is not None else surface.grid.x_nodes[0]), b_T
    density = None
    if hi - lo > 1e-12:
        def density(z):
            return np.asarray(h_values(spec, T, z), dtype=float)
    return StefanData(psi, phi, eta, nu, density, atoms, float(lo), float(hi), spec.stop_below)


def _v_dot(surface: ValueSurface) -> np.ndarray:
    """v_dot = u_dot + g_t on the grid."""
    grid, gain = surface.grid, surface.spec.gain
    g_t = np.asarray(gain.g_t(grid.t_nodes[:, None], grid.x_nodes[None, :]), dtype=float)
    return surface.require("u_dot") + np.broadcast_to(g_t, surface.u.shape)


def _continuation_nodes(surface: ValueSurface, T2: float, offset: int = 3) -> np.ndarray:
    """Interior nodes at least ``offset`` cells inside the continuation region, with t <= T2."""
    spec, grid = surface.spec, surface.grid
    x = grid.x_nodes[None, :]
    b = surface.require("b")[:, None]
    t = grid.t_nodes[:, None]
    if spec.stop_below:
        side = (x >= b + offset * grid.dx) & (x <= spec.rect_x2)
    else:
        side = (x <= b - offset * grid.dx) & (x >= spec.rect_x1)
    mask = side & (t <= T2) & np.isfinite(b)
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return mask


def pde_residual(surface: ValueSurface, data: StefanData, T2: float) -> tuple[np.ndarray, ResidualStats]:
    """v_ddot + L v_dot - r v_dot + psi at continuation nodes at least 3 dx from b, t <= T2.

    v_ddot is the second central difference of v in time; spatial derivatives of v_dot are
    central.

    Returns:
        (residual grid with NaN outside the evaluated nodes, max and L2 statistics).
    """
    spec, grid = surface.spec, surface.grid
    dt, dx = grid.dt, grid.dx
    t = grid.t_nodes[:, None]
    x = grid.x_nodes[None, :]
    v, v_dot = surface.v, _v_dot(surface)
    v_ddot = np.full_like(v, np.nan)
    v_ddot[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / dt**2
    vd_x = np.full_like(v, np.nan)
    vd_xx = np.full_like(v, np.nan)
    vd_x[:, 1:-1] = (v_dot[:, 2:] - v_dot[:, :-2]) / (2.0 * dx)
    vd_xx[:, 1:-1] = (v_dot[:, 2:] - 2.0 * v_dot[:, 1:-1] + v_dot[:, :-2]) / dx**2
    mu = np.broadcast_to(np.asarray(spec.diffusion.mu(t, x), dtype=float), v.shape)
    sig2 = np.broadcast_to(np.asarray(spec.diffusion.sigma(x), dtype=float) ** 2, v.shape)
    r = np.broadcast_to(np.asarray(spec.discount.r(t, x), dtype=float), v.shape)
    psi = np.broadcast_to(np.asarray(data.psi(np.broadcast_to(t, v.shape), np.broadcast_to(x, v.shape))), v.shape)
    residual = v_ddot + 0.5 * sig2 * vd_xx + mu * vd_x - r * v_dot + psi
    mask = _continuation_nodes(surface, T2)
    residual = np.where(mask, residual, np.nan)
    return residual, ResidualStats.of(residual[mask])


def two_grid_order(coarse: float, fine: float) -> float:
    """Observed order log2(coarse / fine) of a quantity under halving of dt and dx."""
    if not (coarse > 0.0 and fine > 0.0):
        return math.inf if fine == 0.0 else math.nan
    return math.log2(coarse / fine)


@dataclass(frozen=True)
class VelocityResiduals:
    """Per-t velocity and boundary-value residuals on [0.1 T1, T2]."""

    t: np.ndarray
    b_dot: np.ndarray
    v_dot_x: np.ndarray
    velocity: np.ndarray
    boundary_value: np.ndarray
    bc_budget: np.ndarray
    jumps: np.ndarray


def _boundary_v_dot_x(surface: ValueSurface, i: int) -> tuple[float, float]:
    """One-sided v_dot_x and v_dot at b(t_i), both extrapolated linearly from the continuation side."""
    spec, grid = surface.spec, surface.grid
    x = grid.x_nodes
    b = float(surface.b[i])
    step = 1 if spec.stop_below else -1
    j = int(np.searchsorted(x, b, side="right")) if step == 1 else int(np.searchsorted(x, b, side="left")) - 1
    u_dot, u_dot_x = surface.u_dot[i], surface.u_dot_x[i]
    frac = (b - x[j]) / (x[j + step] - x[j])
    at_b = u_dot_x[j] + frac * (u_dot_x[j + step] - u_dot_x[j])
    u_dot_b = u_dot[j] + frac * (u_dot[j + step] - u_dot[j])
    t = grid.t_nodes[i]
    v_dot_x = float(at_b + spec.gain.g_tx(t, b))
    v_dot_b = float(u_dot_b + spec.gain.g_t(t, b))
    return v_dot_x, v_dot_b


def stefan_velocity_residual(surface: ValueSurface, data: StefanData, T2: float) -> VelocityResiduals:
    """b_dot + eta v_dot_x(t, b) - nu and v_dot(t, b) - phi per grid time in [0.1 T1, T2].

    The boundary-value budget is |v_dot_x(t, b)| dx, one cell of the linear profile of v_dot.
    ``jumps`` are the increments of t -> v_dot_x(t, b(t)) between consecutive times.
    """
    spec, grid = surface.spec, surface.grid
    idx = np.nonzero((grid.t_nodes >= 0.1 * spec.rect_T1 - 1e-12) & (grid.t_nodes <= T2 + 1e-12))[0]
    t = grid.t_nodes[idx]
    b_dot = surface.require("b_dot_fd")[idx]
    pairs = np.array([_boundary_v_dot_x(surface, int(i)) for i in idx])
    v_dot_x, v_dot_b = pairs[:, 0], pairs[:, 1]
    eta, nu = np.asarray(data.eta(t)), np.asarray(data.nu(t))
    velocity = b_dot + eta * v_dot_x - nu
    boundary_value = v_dot_b - np.asarray(data.phi(t))
    return VelocityResiduals(
        t, b_dot, v_dot_x, velocity, boundary_value, np.abs(v_dot_x) * grid.dx, np.diff(v_dot_x)
    )


@dataclass(frozen=True)
class Bump:
    """Standard mollifier exp(-1 / (1 - s^2)), s = (z - center) / width, supported on |s| < 1."""

    center: float
    width: float

    @property
    def ident(self) -> str:
        return f"bump({self.center:g},{self.width:g})"

    def __call__(self, z) -> np.ndarray:
        s = (np.asarray(z, dtype=float) - self.center) / self.width
        inside = np.abs(s) < 1.0
        out = np.zeros_like(s)
        out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
        return out


@dataclass(frozen=True)
class TerminalTest:
    """lhs(t) along t_list for one test function, the limit rhs = -<xi, Sigma> and the final gap."""

    ident: str
    t: tuple
    lhs: tuple
    rhs: float
    abs_diff: float
    rel_gap: float
    scale: float


def sigma_pairing(data: StefanData, xi: Bump) -> float:
    """<xi, Sigma>: quadrature of the density plus exact atoms."""
    total = sum(mass * float(xi(loc)) for loc, mass in data.sigma_atoms)
    if data.sigma_density is not None:
        lo = max(data.support_lo, xi.center - xi.width)
        hi = min(data.support_hi, xi.center + xi.width)
        if hi > lo:
            value, _ = quad(lambda z: float(data.sigma_density(z)) * float(xi(z)), lo, hi, limit=200)
            total += value
    return total


def terminal_weak_limit(
    surface: ValueSurface, data: StefanData, xi_list: Sequence[Bump], t_list: Sequence[float]
) -> list[TerminalTest]:
    """lhs(t) = integral of v_dot(t, .) xi over the continuation side of b(t) against -<xi, Sigma>.

    Each t is rounded to the nearest time of ``surface`` (a full grid or a terminal layer);
    integrals are trapezoidal on the grid. The gap is relative to |rhs|, or to the integral of
    xi when rhs vanishes.

    Raises:
        ConfigError: If a test function's support leaves the grid or t_list is not increasing.
    """
    grid = surface.grid
    x = grid.x_nodes
    t_list = list(t_list)
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ConfigError("eval.terminal_t_offsets must give increasing times")
    v_dot = _v_dot(surface)
    tests = []
    for xi in xi_list:
        if xi.width <= 0 or xi.center - xi.width < x[0] or xi.center + xi.width > x[-1]:
            raise ConfigError(f"Test function {xi.ident} is not supported inside the grid")
        weights = xi(x)
        lhs = []
        for t in t_list:
            i = int(np.clip(round((t - grid.t_nodes[0]) / grid.dt), 0, grid.n_t))
            b = surface.b[i]
            side = x >= b if data.stop_below else x <= b
            lhs.append(float(trapezoid(np.where(side, v_dot[i] * weights, 0.0), x)))
        rhs = -sigma_pairing(data, xi)
        diff = abs(lhs[-1] - rhs)
        scale = abs(rhs) if rhs != 0.0 else float(trapezoid(weights, x))
        tests.append(TerminalTest(xi.ident, tuple(t_list), tuple(lhs), rhs, diff, diff / scale, scale))
        logger.debug("Terminal limit {}: lhs={} rhs={:.6g}", xi.ident, ", ".join(f"{v:.5g}" for v in lhs), rhs)
    return tests


def default_test_functions(spec: ProblemSpec, surface: ValueSurface) -> list[Bump]:
    """A bump at the strike (width 0.2 K) and, when Sigma has a density, one inside its support.

    The density bump is supported from 10% to 70% of the way from b(T) to the strike.
    """
    kink = spec.gain.kink
    bumps = []
    if kink is not None:
        bumps.append(Bump(float(kink), 0.2 * abs(float(kink))))
    b_T = terminal_boundary(spec)
    if kink is not None and abs(b_T - kink) > 1e-12:
        span = float(kink) - b_T
        bumps.append(Bump(b_T + 0.4 * span, 0.3 * abs(span)))
    return bumps


def verify_stefan(
    surface: ValueSurface,
    T2: float,
    refined: Optional[ValueSurface] = None,
    t_offsets: Sequence[int] = (10, 5, 2),
    xi_list: Optional[Sequence[Bump]] = None,
    velocity_rel_tol: float = 0.15,
    velocity_pass_fraction: float = 0.8,
    terminal_rel_tol: float = 0.05,
    terminal_substeps: int = 50,
    min_order: float = 1.0,
) -> StefanReport:
    """Runs every Stefan condition on ``surface`` (and ``refined`` for the decay checks).

    The terminal limit is read on a fully implicit layer re-solved over the last
    max(t_offsets) + 1 steps of size dt / ``terminal_substeps``.

    Args:
        surface: Solved surface with derivatives.
        T2: Upper end of the checked time window.
        refined: The same problem on the doubled grid.
        t_offsets: Terminal-limit times T - k dt_layer, in decreasing k.
        xi_list: Test functions; a bump at the strike by default.
        velocity_rel_tol: Relative part of the velocity budget.
        velocity_pass_fraction: Share of times that must meet the velocity budget.
        terminal_rel_tol: Allowed gap of the terminal limit relative to |rhs|.
        terminal_substeps: Layer steps per grid step.
        min_order: Required two-grid order of the interior, boundary-value and velocity residuals.

    Returns:
        The report with per-condition verdicts.
    """
    spec, grid = surface.spec, surface.grid
    data = stefan_data_for(spec, surface)
    report = StefanReport()

    _, pde = pde_residual(surface, data, T2)
    report.pde_residual_stats = {"max": pde.max, "l2": pde.l2, "n": pde.n}
    vel = stefan_velocity_residual(surface, data, T2)
    bc_stats = asdict(ResidualStats.of(vel.boundary_value))
    ode_stats = asdict(ResidualStats.of(vel.velocity))
    grid_budget = np.zeros_like(vel.velocity)
    if refined is not None:
        data_f = stefan_data_for(spec, refined)
        _, pde_f = pde_residual(refined, data_f, T2)
        vel_f = stefan_velocity_residual(refined, data_f, T2)
        grid_budget = np.abs(vel.velocity - np.interp(vel.t, vel_f.t, vel_f.velocity))
        for name, stats, coarse_l2, fine_l2 in (
            ("pde_decay", report.pde_residual_stats, pde.l2, pde_f.l2),
            ("bc_decay", bc_stats, bc_stats["l2"], ResidualStats.of(vel_f.boundary_value).l2),
            ("velocity_decay", ode_stats, ode_stats["l2"], ResidualStats.of(vel_f.velocity).l2),
        ):
            order = two_grid_order(coarse_l2, fine_l2)
            stats.update({"l2_refined": fine_l2, "order": order})
            report.verdicts[name] = "PASS" if order >= min_order else "FAIL"
            report.rows.append(StefanRow(name, "order", order, min_order, report.verdicts[name]))
        report.pde_residual_stats["max_refined"] = pde_f.max
    report.rows.append(StefanRow("pde", "max", pde.max, math.nan, "INFO"))
    report.rows.append(StefanRow("pde", "l2", pde.l2, math.nan, "INFO"))

    budget = velocity_rel_tol * np.maximum(np.abs(vel.b_dot), np.abs(vel.v_dot_x * data.eta(vel.t))) + grid_budget
    ok = np.abs(vel.velocity) <= budget
    share = float(np.mean(ok)) if ok.size else 0.0
    report.ode_residual_stats = {**ode_stats, "pass_fraction": share}
    report.verdicts["velocity"] = "PASS" if share >= velocity_pass_fraction else "FAIL"
    for t, res, bud, good in zip(vel.t, vel.velocity, budget, ok):
        report.rows.append(StefanRow("velocity", f"{t:.6g}", float(res), float(bud), "PASS" if good else "FAIL"))

    bc_ok = np.abs(vel.boundary_value) <= vel.bc_budget + 1e-12 * surface.scale
    report.bc_residual_stats = {**bc_stats, "pass_fraction": float(np.mean(bc_ok))}
    report.verdicts["boundary_value"] = "PASS" if bool(np.all(bc_ok)) else "FAIL"
    for t, res, bud, good in zip(vel.t, vel.boundary_value, vel.bc_budget, bc_ok):
        report.rows.append(StefanRow("boundary_value", f"{t:.6g}", float(res), float(bud), "PASS" if good else "FAIL"))

    jumps = np.abs(vel.jumps)
    if jumps.size:
        jump_budget = 5.0 * float(np.median(jumps)) + float(np.max(grid_budget, initial=0.0))
        report.rows.append(StefanRow("continuity", "max_jump", float(jumps.max()), jump_budget,
                                     "INFO" if jumps.max() <= jump_budget else "WARN"))
        report.verdicts["continuity"] = "INFO"

    eta_t = np.asarray(data.eta(grid.t_nodes[grid.t_nodes <= spec.rect_T1]))
    report.verdicts["eta_positive"] = "PASS" if bool(np.all(eta_t > 0.0)) else "FAIL"
    report.rows.append(StefanRow("eta_positive", "min", float(eta_t.min()), 0.0, report.verdicts["eta_positive"]))

    layer = solve_terminal_layer(surface, max(t_offsets) + 1, terminal_substeps)
    t_list = [spec.horizon_T - k * layer.grid.dt for k in t_offsets]
    xi_list = list(xi_list) if xi_list is not None else default_test_functions(spec, surface)
    report.terminal_tests = terminal_weak_limit(layer, data, xi_list, t_list)
    terminal_ok = True
    for test in report.terminal_tests:
        good = test.rel_gap <= terminal_rel_tol
        terminal_ok &= good
        report.rows.append(StefanRow("terminal", test.ident, test.abs_diff, terminal_rel_tol * test.scale,
                                     "PASS" if good else "FAIL"))
    report.verdicts["terminal"] = "PASS" if terminal_ok else "FAIL"
    logger.info("Stefan verification: {}", ", ".join(f"{k}={v}" for k, v in report.verdicts.items()))
    return report
