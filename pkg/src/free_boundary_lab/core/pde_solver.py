"""
File: pde_solver.py
Description: Crank-Nicolson / PSOR solver for the obstacle problem, free-boundary extraction
    and the finite-difference derivative fields consumed by the probabilistic estimators.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from loguru import logger
from numba import njit
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq
from scipy.signal import savgol_filter

from free_boundary_lab.core.exceptions import BoundaryEscapeError, DomainError, NumericalFailureError
from free_boundary_lab.core.model import ProblemSpec, h_values

MIN_NODES = 64
OMEGA_CANDIDATES = (1.0, 1.2, 1.4, 1.5, 1.6, 1.7, 1.8, 1.85, 1.9, 1.95)


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid with x1 and x2 on nodes.

    Attributes:
        t_nodes: Times 0 = t_0 < ... < t_Nt = T.
        x_nodes: States spanning at least [x_lo, x_hi].
        i_x1: Index of x1 in ``x_nodes``.
        i_x2: Index of x2 in ``x_nodes``.
    """

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    i_x1: int
    i_x2: int

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])

    @property
    def dx(self) -> float:
        return float(self.x_nodes[1] - self.x_nodes[0])

    @property
    def n_t(self) -> int:
        return len(self.t_nodes) - 1

    @property
    def n_x(self) -> int:
        return len(self.x_nodes) - 1

    @classmethod
    def build(
        cls,
        spec: ProblemSpec,
        n_t: int,
        n_x: int,
        x_lo: Optional[float] = None,
        x_hi: Optional[float] = None,
    ) -> "Grid":
        """Builds a grid over [0, T] x [x_lo, x_hi] with x1, x2 snapped onto nodes.

        ``n_x`` is the target number of intervals across [x_lo, x_hi]; the spacing is then
        adjusted so that (x2 - x1) is an integer number of steps.

        Raises:
            DomainError: If the grid is too coarse or the lateral margins are below 10% of x2 - x1.
        """
        x1, x2 = spec.rect_x1, spec.rect_x2
        span = x2 - x1
        x_lo, x_hi = default_extents(spec, x_lo, x_hi)
        if n_t < MIN_NODES or n_x < MIN_NODES:
            raise DomainError(f"Grid needs N_t, N_x >= {MIN_NODES}, got N_t={n_t}, N_x={n_x}")
        if x1 - x_lo < 0.1 * span or x_hi - x2 < 0.1 * span:
            raise DomainError("Grid margins beyond the rectangle must be at least 10% of x2 - x1")
        if x_lo <= spec.diffusion.domain_lo or x_hi >= spec.diffusion.domain_hi:
            raise DomainError("Grid extents must lie inside the state interval")

        m = max(1, int(round(span / ((x_hi - x_lo) / n_x))))
        dx = span / m
        n_lo = int(math.ceil((x1 - x_lo) / dx - 1e-9))
        n_hi = int(math.ceil((x_hi - x2) / dx - 1e-9))
        if x1 - n_lo * dx <= spec.diffusion.domain_lo:
            n_lo -= 1
        x_nodes = x1 + dx * np.arange(-n_lo, m + n_hi + 1, dtype=float)
        x_nodes[n_lo] = x1
        x_nodes[n_lo + m] = x2
        t_nodes = np.linspace(0.0, spec.horizon_T, n_t + 1)
        return cls(t_nodes=t_nodes, x_nodes=x_nodes, i_x1=n_lo, i_x2=n_lo + m)

    def refined(self, spec: ProblemSpec) -> "Grid":
        """The grid with dt and dx halved over the same extents; every coarse node is kept."""
        m = self.i_x2 - self.i_x1
        half = 0.5 * (spec.rect_x2 - spec.rect_x1) / m
        x_nodes = spec.rect_x1 + half * np.arange(-2 * self.i_x1, 2 * self.n_x - 2 * self.i_x1 + 1)
        x_nodes[2 * self.i_x1] = spec.rect_x1
        x_nodes[2 * (self.i_x1 + m)] = spec.rect_x2
        t_nodes = np.linspace(0.0, spec.horizon_T, 2 * self.n_t + 1)
        return Grid(t_nodes=t_nodes, x_nodes=x_nodes, i_x1=2 * self.i_x1, i_x2=2 * self.i_x2)


def default_extents(
    spec: ProblemSpec, x_lo: Optional[float] = None, x_hi: Optional[float] = None
) -> tuple[float, float]:
    """Lateral grid extents: half a rectangle width below x1 and two widths above x2 by default."""
    span = spec.rect_x2 - spec.rect_x1
    if x_lo is None:
        x_lo = spec.rect_x1 - 0.5 * span
        lo = spec.diffusion.domain_lo
        if np.isfinite(lo) and x_lo <= lo:
            x_lo = lo + 0.5 * (spec.rect_x1 - lo)
    if x_hi is None:
        x_hi = spec.rect_x2 + 2.0 * span
        hi = spec.diffusion.domain_hi
        if np.isfinite(hi) and x_hi >= hi:
            x_hi = hi - 0.5 * (hi - spec.rect_x2)
    return float(x_lo), float(x_hi)


@dataclass
class ValueSurface:
    """Solved value grid with its boundary and derivative fields.

    Attributes:
        spec: Problem that was solved.
        grid: Space-time grid.
        v: Value function, shape (N_t + 1, N_x + 1).
        u: v minus the payoff.
        scale: max |payoff| on the rectangle (1 when the payoff vanishes there).
        b: Boundary per time slice (NaN where undefined).
        b_dot_fd: Smoothed finite-difference slope of b.
        u_dot, u_x, u_xx, u_dot_x, v_x: Derivative grids filled by fd_derivatives.
        omega: Relaxation factor used by PSOR.
        sweeps: PSOR sweeps per time step (backward order).
    """

    spec: ProblemSpec
    grid: Grid
    v: np.ndarray
    u: np.ndarray
    scale: float
    b: Optional[np.ndarray] = None
    b_dot_fd: Optional[np.ndarray] = None
    eps: Optional[float] = None
    u_dot: Optional[np.ndarray] = None
    u_x: Optional[np.ndarray] = None
    u_xx: Optional[np.ndarray] = None
    u_dot_x: Optional[np.ndarray] = None
    v_x: Optional[np.ndarray] = None
    omega: float = 1.0
    sweeps: list = field(default_factory=list)
    _interpolators: dict = field(default_factory=dict, repr=False)

    def require(self, name: str) -> np.ndarray:
        values = getattr(self, name)
        if values is None:
            raise DomainError(f"Field '{name}' has not been computed on this surface")
        return values

    def interp(self, name: str, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of a grid field; inputs are clamped to the grid."""
        if name not in self._interpolators:
            self._interpolators[name] = RegularGridInterpolator(
                (self.grid.t_nodes, self.grid.x_nodes), self.require(name), method="linear"
            )
        t = np.clip(np.asarray(t, dtype=float), self.grid.t_nodes[0], self.grid.t_nodes[-1])
        x = np.clip(np.asarray(x, dtype=float), self.grid.x_nodes[0], self.grid.x_nodes[-1])
        t, x = np.broadcast_arrays(t, x)
        points = np.stack([t.ravel(), x.ravel()], axis=-1)
        return self._interpolators[name](points).reshape(t.shape)

    def local_u(self, t: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """u and u_x measured from the smooth gain branch, as needed by H."""
        gain = self.spec.gain
        u_val = self.interp("v", t, x) - np.asarray(gain.g(t, x), dtype=float)
        u_x_val = self.interp("v_x", t, x) - np.asarray(gain.g_x(t, x), dtype=float)
        return u_val, u_x_val

    def boundary_at(self, t: np.ndarray) -> np.ndarray:
        """Piecewise-linear interpolant of the extracted boundary."""
        b = self.require("b")
        ok = np.isfinite(b)
        return np.interp(t, self.grid.t_nodes[ok], b[ok])

    def b_dot_at(self, t: np.ndarray) -> np.ndarray:
        b_dot = self.require("b_dot_fd")
        ok = np.isfinite(b_dot)
        return np.interp(t, self.grid.t_nodes[ok], b_dot[ok])


@njit(cache=True)
def _lcp_residual(lower, diag, upper, rhs, obstacle, x):
    """max_j |min(A x - rhs, x - obstacle)_j| for the tridiagonal A."""
    n = x.size
    worst = 0.0
    for j in range(n):
        ax = diag[j] * x[j]
        if j > 0:
            ax += lower[j] * x[j - 1]
        if j < n - 1:
            ax += upper[j] * x[j + 1]
        res = min(ax - rhs[j], x[j] - obstacle[j])
        if abs(res) > worst:
            worst = abs(res)
    return worst


@njit(cache=True)
def _psor(lower, diag, upper, rhs, obstacle, x, omega, tol, max_sweeps):
    """Projected SOR sweeps until the complementarity residual drops below ``tol``."""
    n = x.size
    residual = np.inf
    for sweep in range(max_sweeps):
        for j in range(n):
            s = rhs[j]
            if j > 0:
                s -= lower[j] * x[j - 1]
            if j < n - 1:
                s -= upper[j] * x[j + 1]
            new = x[j] + omega * (s / diag[j] - x[j])
            if new < obstacle[j]:
                new = obstacle[j]
            x[j] = new
        residual = _lcp_residual(lower, diag, upper, rhs, obstacle, x)
        if residual < tol:
            return sweep + 1, residual
    return max_sweeps, residual


def _operator(spec: ProblemSpec, t: float, x: np.ndarray, dx: float):
    """Tridiagonal coefficients of L - r at interior nodes."""
    sig2 = np.asarray(spec.diffusion.sigma(x), dtype=float) ** 2
    mu = np.broadcast_to(np.asarray(spec.diffusion.mu(t, x), dtype=float), x.shape)
    r = np.broadcast_to(np.asarray(spec.discount.r(t, x), dtype=float), x.shape)
    a = 0.5 * sig2 / dx**2 - 0.5 * mu / dx
    b = -sig2 / dx**2 - r
    c = 0.5 * sig2 / dx**2 + 0.5 * mu / dx
    return a, b, c


def _tune_omega(lower, diag, upper, rhs, obstacle, guess, tol, max_sweeps) -> float:
    best, best_sweeps = 1.0, None
    for omega in OMEGA_CANDIDATES:
        trial = guess.copy()
        sweeps, residual = _psor(lower, diag, upper, rhs, obstacle, trial, omega, tol, max_sweeps)
        if residual < tol and (best_sweeps is None or sweeps < best_sweeps):
            best, best_sweeps = omega, sweeps
    logger.debug("PSOR omega tuned to {} ({} sweeps on the trial step)", best, best_sweeps)
    return best


def solve_obstacle(
    spec: ProblemSpec,
    grid: Grid,
    omega: Optional[float] = None,
    rannacher_steps: int = 2,
    tol_factor: float = 1e-9,
    max_sweeps: int = 100_000,
    scale: Optional[float] = None,
) -> ValueSurface:
    """Solves v = max(payoff, continuation) backward in time.

    Crank-Nicolson in time (the first ``rannacher_steps`` steps fully implicit), central
    differences in space, Dirichlet v = payoff at both lateral edges, PSOR per step.

    Args:
        spec: Problem specification.
        grid: Space-time grid.
        omega: Relaxation factor; tuned on the first step when omitted.
        rannacher_steps: Number of implicit start-up steps.
        tol_factor: Bound on the complementarity residual min(A v - rhs, v - payoff),
            relative to the payoff scale.
        max_sweeps: PSOR sweep limit per step.
        scale: Payoff scale; max |payoff| over the rectangle when omitted.

    Returns:
        The solved ValueSurface (derivatives and boundary not yet filled).

    Raises:
        NumericalFailureError: If PSOR does not converge within ``max_sweeps``.
    """
    t_nodes, x = grid.t_nodes, grid.x_nodes
    dt, dx = grid.dt, grid.dx
    payoff = np.stack([np.broadcast_to(spec.gain.obstacle(t, x), x.shape) for t in t_nodes])
    if scale is None:
        rect = payoff[: np.searchsorted(t_nodes, spec.rect_T1, side="right"), grid.i_x1 : grid.i_x2 + 1]
        scale = float(np.max(np.abs(rect))) or 1.0
    tol = tol_factor * scale

    v = np.empty_like(payoff)
    v[-1] = payoff[-1]
    interior = x[1:-1]
    sweeps_log = []
    explicit = _operator(spec, t_nodes[-1], interior, dx)
    for n in range(grid.n_t - 1, -1, -1):
        theta = 1.0 if (grid.n_t - 1 - n) < rannacher_steps else 0.5
        a, b, c = _operator(spec, t_nodes[n], interior, dx)
        ea, eb, ec = explicit
        prev = v[n + 1]
        rhs = prev[1:-1] + (1.0 - theta) * dt * (ea * prev[:-2] + eb * prev[1:-1] + ec * prev[2:])
        v[n, 0], v[n, -1] = payoff[n, 0], payoff[n, -1]
        rhs[0] += theta * dt * a[0] * v[n, 0]
        rhs[-1] += theta * dt * c[-1] * v[n, -1]
        lower = -theta * dt * a
        diag = 1.0 - theta * dt * b
        upper = -theta * dt * c
        obstacle = np.ascontiguousarray(payoff[n, 1:-1])
        guess = np.maximum(prev[1:-1], obstacle)
        if omega is None:
            omega = _tune_omega(lower, diag, upper, rhs, obstacle, guess, tol, max_sweeps)
        sweeps, residual = _psor(lower, diag, upper, rhs, obstacle, guess, omega, tol, max_sweeps)
        if residual >= tol:
            raise NumericalFailureError(
                f"PSOR did not converge at t={t_nodes[n]:.6g} after {sweeps} sweeps "
                f"(complementarity residual {residual:.3g}, tolerance {tol:.3g})",
                stage="solve",
                residual=float(residual),
            )
        v[n, 1:-1] = guess
        sweeps_log.append(int(sweeps))
        explicit = (a, b, c)

    logger.info(
        "Solved {} on {}x{} grid: omega={}, mean PSOR sweeps={:.1f}",
        spec.name, grid.n_t, grid.n_x, omega, float(np.mean(sweeps_log)),
    )
    return ValueSurface(
        spec=spec, grid=grid, v=v, u=v - payoff, scale=scale, omega=float(omega), sweeps=sweeps_log
    )


def terminal_boundary(spec: ProblemSpec) -> float:
    """Boundary value at maturity: edge of {payoff > 0} and {h(T, .) < 0} on the stopping side.

    Put: min(K, rK/delta); call: max(K, rK/delta).
    """
    T = spec.horizon_T
    kink = spec.gain.kink
    span = spec.rect_x2 - spec.rect_x1
    lo_dom, hi_dom = spec.diffusion.domain_lo, spec.diffusion.domain_hi
    lo = 0.5 * (lo_dom + spec.rect_x1) if np.isfinite(lo_dom) else spec.rect_x1 - 20.0 * span
    hi = 0.5 * (hi_dom + spec.rect_x2) if np.isfinite(hi_dom) else spec.rect_x2 + 20.0 * span
    xs = np.linspace(lo, hi, 4001)
    h = np.broadcast_to(h_values(spec, T, xs), xs.shape)
    bad = np.nonzero(h >= 0.0)[0]

    def root(k: int) -> float:
        return brentq(lambda z: float(h_values(spec, T, z)), xs[k], xs[k + 1], xtol=1e-14)

    if spec.stop_below:
        if not bad.size:
            h_edge = np.inf
        else:
            h_edge = root(bad[0] - 1) if bad[0] > 0 else float(xs[0])
        edge = min(h_edge, kink) if kink is not None else h_edge
    else:
        if not bad.size:
            h_edge = -np.inf
        else:
            h_edge = root(bad[-1]) if bad[-1] < xs.size - 1 else float(xs[-1])
        edge = max(h_edge, kink) if kink is not None else h_edge
    return float(edge)


def _refine_crossing(x: np.ndarray, u: np.ndarray, j: int, step: int, eps: float) -> float:
    """Sub-grid crossing next to the first continuation node ``j``.

    ``step`` points into the continuation region (+1 for stop-below, -1 for stop-above).
    """
    dx = abs(x[1] - x[0])
    nxt = j + step
    if 0 <= nxt < u.size and u[nxt] > eps:
        s_j, s_n = math.sqrt(u[j]), math.sqrt(u[nxt])
        slope = (s_n - s_j) / dx
        if slope > 0.0:
            dist = min(s_j / slope, dx)
            return float(x[j] - step * dist)
    prev = j - step
    frac = (eps - u[prev]) / (u[j] - u[prev])
    return float(x[prev] + step * frac * dx)


def boundary_slope(b: np.ndarray, dt: float, window: int = 5, order: int = 2) -> np.ndarray:
    """Savitzky-Golay derivative of b over its leading run of finite values (NaN elsewhere)."""
    slope = np.full_like(b, np.nan)
    finite = np.isfinite(b)
    n_ok = int(np.argmin(finite)) if not finite.all() else b.size
    if n_ok >= window:
        slope[:n_ok] = savgol_filter(b[:n_ok], window, order, deriv=1, delta=dt, mode="interp")
    return slope


def extract_boundary(surface: ValueSurface, eps: Optional[float] = None, window: int = 5) -> np.ndarray:
    """Locates b(t_i) on every slice and fills ``surface.b`` and ``surface.b_dot_fd``.

    The slice is scanned from the stopping side; the first node with u > eps brackets the
    crossing, which is refined by linear extrapolation of sqrt(u) (exact for the quadratic
    contact profile). The maturity slice gets ``terminal_boundary``.

    Args:
        surface: Solved surface.
        eps: Contact threshold, 1e-8 * scale by default.
        window: Savitzky-Golay window for b_dot_fd.

    Returns:
        The boundary array (NaN on slices after T1 with no crossing).

    Raises:
        BoundaryEscapeError: If for some t <= T1 there is no contact set or the crossing lies
            outside (x1, x2).
    """
    spec, grid = surface.spec, surface.grid
    eps = 1e-8 * surface.scale if eps is None else eps
    x = grid.x_nodes
    b = np.full(grid.n_t + 1, np.nan)
    step = 1 if spec.stop_below else -1
    for i in range(grid.n_t):
        row = surface.u[i]
        cont = row > eps
        order = np.arange(1, x.size) if step == 1 else np.arange(x.size - 2, -1, -1)
        hits = order[cont[order]]
        if hits.size:
            j = int(hits[0])
            if 0 <= j - step < x.size and not cont[j - step]:
                b[i] = _refine_crossing(x, row, j, step, eps)
        t = grid.t_nodes[i]
        if t <= spec.rect_T1 * (1.0 + 1e-12):
            if not np.isfinite(b[i]) or not spec.rect_x1 < b[i] < spec.rect_x2:
                raise BoundaryEscapeError(
                    f"Boundary at t={t:.6g} is {b[i]:.6g}, outside ({spec.rect_x1}, {spec.rect_x2})",
                    stage="boundary",
                )
    b[-1] = terminal_boundary(spec)
    surface.b = b
    surface.eps = eps
    surface.b_dot_fd = boundary_slope(b[:-1], grid.dt, window=window)
    surface.b_dot_fd = np.append(surface.b_dot_fd, np.nan)
    logger.debug("Boundary extracted: b(0)={:.6g}, b(T1)~{:.6g}, b(T)={:.6g}", b[0],
                 float(surface.boundary_at(spec.rect_T1)), b[-1])
    return b


def _stopping_mask(surface: ValueSurface) -> np.ndarray:
    """True on nodes strictly on the stopping side of b (u <= eps where b is undefined)."""
    x = surface.grid.x_nodes[None, :]
    b = surface.require("b")[:, None]
    eps = surface.eps if surface.eps is not None else 1e-8 * surface.scale
    side = x < b if surface.spec.stop_below else x > b
    return np.where(np.isfinite(b), side, surface.u <= eps)


def fd_derivatives(surface: ValueSurface) -> ValueSurface:
    """Fills u_dot, u_x, u_xx, u_dot_x and v_x.

    Central differences everywhere in the interior, second-order one-sided stencils at the
    grid edges and at the first continuation node next to b; stopping-side nodes are zero.
    """
    grid = surface.grid
    dt, dx = grid.dt, grid.dx
    u = surface.u
    if surface.b is None:
        extract_boundary(surface)

    u_dot = np.gradient(u, dt, axis=0, edge_order=2)
    u_x = np.gradient(u, dx, axis=1, edge_order=2)
    u_xx = np.zeros_like(u)
    u_xx[:, 1:-1] = (u[:, 2:] - 2.0 * u[:, 1:-1] + u[:, :-2]) / dx**2
    u_xx[:, 0], u_xx[:, -1] = u_xx[:, 1], u_xx[:, -2]
    u_dot_x = np.gradient(u_dot, dx, axis=1, edge_order=2)

    stopping = _stopping_mask(surface)
    step = 1 if surface.spec.stop_below else -1
    n = u.shape[1]
    for i in range(u.shape[0]):
        cont = np.nonzero(~stopping[i])[0]
        if cont.size == 0 or cont.size == n:
            continue
        j = int(cont[0]) if step == 1 else int(cont[-1])
        if not 0 <= j + 2 * step < n:
            continue
        row, row_dot = u[i], u_dot[i]
        s = step / dx
        u_x[i, j] = s * (-3.0 * row[j] + 4.0 * row[j + step] - row[j + 2 * step]) / 2.0
        u_xx[i, j] = (row[j] - 2.0 * row[j + step] + row[j + 2 * step]) / dx**2
        u_dot_x[i, j] = s * (-3.0 * row_dot[j] + 4.0 * row_dot[j + step] - row_dot[j + 2 * step]) / 2.0

    for values in (u_dot, u_x, u_xx, u_dot_x):
        values[stopping] = 0.0

    surface.u_dot, surface.u_x, surface.u_xx, surface.u_dot_x = u_dot, u_x, u_xx, u_dot_x
    surface.v_x = np.gradient(surface.v, dx, axis=1, edge_order=2)
    surface._interpolators.clear()
    return surface


def solve_and_extract(
    spec: ProblemSpec, grid: Grid, window: int = 5, tol_factor: float = 1e-9
) -> ValueSurface:
    """solve_obstacle, extract_boundary and fd_derivatives in one call."""
    surface = solve_obstacle(spec, grid, tol_factor=tol_factor)
    extract_boundary(surface, window=window)
    return fd_derivatives(surface)


def solve_terminal_layer(surface: ValueSurface, n_steps: int, substeps: int = 50) -> ValueSurface:
    """Re-solves the last ``n_steps`` steps of size dt / ``substeps`` before T, fully implicit.

    The layer keeps the x nodes and payoff scale of ``surface``; boundary and derivative fields
    are filled.

    Raises:
        DomainError: If the layer would start before t = 0 or has fewer than two steps.
    """
    spec, grid = surface.spec, surface.grid
    if n_steps < 2 or substeps < 1:
        raise DomainError(f"Terminal layer needs n_steps >= 2 and substeps >= 1, got {n_steps}, {substeps}")
    dt = grid.dt / substeps
    T = spec.horizon_T
    if n_steps * dt > T:
        raise DomainError(f"Terminal layer of {n_steps} steps of {dt:.3g} starts before t = 0")
    t_nodes = T - dt * np.arange(n_steps, -1, -1, dtype=float)
    t_nodes[-1] = T
    layer_grid = Grid(t_nodes=t_nodes, x_nodes=grid.x_nodes, i_x1=grid.i_x1, i_x2=grid.i_x2)
    layer = solve_obstacle(spec, layer_grid, rannacher_steps=n_steps, scale=surface.scale)
    extract_boundary(layer)
    return fd_derivatives(layer)
