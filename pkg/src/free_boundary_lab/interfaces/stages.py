"""
File: stages.py
Description: Pipeline stages behind the subcommands (solve, boundary, lambda, vh,
    verify-stefan, bessel-check) and the shared context that solves each grid once.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from free_boundary_lab.core.bessel import BoundaryCurveY, sample_pitman_path
from free_boundary_lab.core.bessel_suite import run_bessel_suite
from free_boundary_lab.core.exceptions import ConfigError, DomainError
from free_boundary_lab.core.instances import build_problem
from free_boundary_lab.core.lambda_mc import (
    build_boundary_curve_y,
    estimate_lambda,
    estimate_Vh_streamed,
    estimate_Vs_integral,
    expansion_convergence,
    lamperti_for,
)
from free_boundary_lab.core.model import LampertiMap, ProblemSpec
from free_boundary_lab.core.pde_checks import (
    binomial_american_value,
    complementarity_check,
    dotv_bound_check,
    hitting_prob_check,
    lipschitz_ratio_check,
    mc_udot_check,
    smooth_fit_check,
)
from free_boundary_lab.core.pde_solver import Grid, ValueSurface, solve_and_extract, terminal_boundary
from free_boundary_lab.core.run_config import RunConfig
from free_boundary_lab.core.stefan import verify_stefan
from free_boundary_lab.services.artifacts import (
    CHECK_COLUMNS,
    EXPANSION_COLUMNS,
    LAMBDA_COLUMNS,
    STEFAN_COLUMNS,
    VH_COLUMNS,
    ArtifactWriter,
)
from free_boundary_lab.services.random_streams import substream
from free_boundary_lab.utils.text_helpers import format_table, report_header, verdicts_to_string

# Discrete-monitoring shift of an Euler-sampled barrier, in units of sigma sqrt(dt).
DISCRETE_MONITORING_SHIFT = 0.5826
VS_DOUBLING_PATHS = 1000

CheckRow = Tuple[str, float, float, str]


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


@dataclass
class StageResult:
    """Outcome of one stage: per-check verdicts plus a summary for the run report."""

    name: str
    verdicts: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "FAIL" if any(v == "FAIL" for v in self.verdicts.values()) else "PASS"

    def add_rows(self, rows: List[CheckRow]) -> None:
        for check, _, _, verdict in rows:
            self.verdicts[check] = verdict


class PipelineContext:
    """Lazily built objects shared by the stages of one run.

    The coarse and refined surfaces are solved at most once per run, so ``all`` pays for
    each grid a single time.
    """

    def __init__(self, config: RunConfig, writer: ArtifactWriter, workers: int = 1):
        self.config = config
        self.writer = writer
        self.workers = workers
        self.spec: ProblemSpec = build_problem(config.problem)
        self._surface: Optional[ValueSurface] = None
        self._refined: Optional[ValueSurface] = None
        self._lamperti: Optional[LampertiMap] = None
        self._curve: Optional[BoundaryCurveY] = None

    @property
    def seed(self) -> int:
        return self.config.mc.seed

    def grid(self) -> Grid:
        g = self.config.grid
        try:
            return Grid.build(self.spec, g.N_t, g.N_x, g.x_lo, g.x_hi)
        except DomainError as e:
            raise ConfigError(f"grid: {e}") from e

    def _solve(self, grid: Grid, label: str) -> ValueSurface:
        g = self.config.grid
        logger.info("Solving the obstacle problem on the {} grid ({} x {})", label, grid.n_t, grid.n_x)
        return solve_and_extract(self.spec, grid, window=g.slope_window, tol_factor=g.psor_tol_factor)

    def surface(self) -> ValueSurface:
        if self._surface is None:
            self._surface = self._solve(self.grid(), "base")
        return self._surface

    def refined(self) -> Optional[ValueSurface]:
        """Surface on the doubled grid, or None when ``grid.refine`` is off."""
        if not self.config.grid.refine:
            return None
        if self._refined is None:
            self._refined = self._solve(self.surface().grid.refined(self.spec), "refined")
        return self._refined

    def lamperti(self) -> LampertiMap:
        if self._lamperti is None:
            self._lamperti = lamperti_for(self.surface())
        return self._lamperti

    def curve(self) -> BoundaryCurveY:
        if self._curve is None:
            self._curve = build_boundary_curve_y(self.surface(), self.lamperti())
        return self._curve

    def two_grid(self, fn: Callable[[ValueSurface], float]) -> float:
        """|q(N) - q(2N)| for a scalar read off a surface; 0 without refinement."""
        refined = self.refined()
        if refined is None:
            return 0.0
        return abs(float(fn(self.surface())) - float(fn(refined)))

    def require_stop_below(self, stage: str) -> None:
        if not self.spec.stop_below:
            raise ConfigError(f"The {stage} stage needs a stop-below problem (put instances)")


def run_solve(ctx: PipelineContext) -> StageResult:
    """Solves the base grid, writes surface.csv and boundary.csv and runs the sanity checks."""
    spec, cfg = ctx.spec, ctx.config
    surface = ctx.surface()
    ctx.writer.write_surface(surface)
    ctx.writer.write_boundary(surface)
    result = StageResult("solve")
    p = cfg.problem

    min_u = float(np.min(surface.u))
    rows: List[CheckRow] = [("v_above_payoff", min_u, -1e-12 * surface.scale,
                             _verdict(min_u >= -1e-12 * surface.scale))]

    if spec.time_homogeneous:
        oracle = binomial_american_value(p.kind, p.K, p.K, p.r, p.delta, p.sigma, p.T, cfg.eval.binomial_steps)
        v0 = float(surface.interp("v", 0.0, p.K))
        diff = abs(v0 - oracle)
        rows.append(("binomial_v0", diff, cfg.eval.binomial_tol, _verdict(diff <= cfg.eval.binomial_tol)))
        result.summary.update({"v0": v0, "binomial_v0": oracle})
    else:
        rows.append(("binomial_v0", math.nan, cfg.eval.binomial_tol, "INFO"))

    b_T = float(surface.b[-1])
    expected = terminal_boundary(spec)
    dx = surface.grid.dx
    gap = abs(b_T - expected)
    rows.append(("terminal_boundary", gap, 2.0 * dx, _verdict(gap <= 2.0 * dx)))
    rows.append(("terminal_boundary_vs_strike", abs(b_T - p.K), 2.0 * dx,
                 "INFO" if abs(expected - p.K) > 1e-12 else _verdict(abs(b_T - p.K) <= 2.0 * dx)))
    ctx.writer.write_csv("solve_checks.csv", CHECK_COLUMNS, rows)
    result.add_rows(rows)
    result.summary.update({"omega": surface.omega, "max_sweeps": int(max(surface.sweeps, default=0)),
                           "b_T": b_T, "dx": dx, "dt": surface.grid.dt})
    return result


def _udot_points(ctx: PipelineContext) -> List[Tuple[float, float]]:
    if ctx.config.eval.udot_points:
        return [tuple(p) for p in ctx.config.eval.udot_points]
    surface, spec = ctx.surface(), ctx.spec
    far = spec.rect_x2 if spec.stop_below else spec.rect_x1
    points = []
    for t in ctx.config.resolved_t_list:
        b = float(surface.boundary_at(t))
        points.append((t, b + 0.5 * (far - b)))
    return points


def run_boundary(ctx: PipelineContext) -> StageResult:
    """Regularity checks of the extracted boundary and the u_dot representation points."""
    spec, cfg, ev = ctx.spec, ctx.config, ctx.config.eval
    surface, refined = ctx.surface(), ctx.refined()
    T2 = cfg.resolved_T2
    rows: List[CheckRow] = []

    if spec.time_homogeneous:
        dotv = dotv_bound_check(surface, spec.rect_T1, refined, ev.growth_tol)
        rows.append(("dotv_constant", dotv.value, math.inf, _verdict(math.isfinite(dotv.value))))
        if dotv.growth is not None:
            rows.append(("dotv_constant_growth", dotv.growth, ev.growth_tol, _verdict(dotv.growth < ev.growth_tol)))
        lip = lipschitz_ratio_check(surface, T2, refined, dotv.value, ev.growth_tol)
        tol = -surface.grid.dx / surface.grid.dt
        rows.append(("monotone_min_slope", lip.min_slope, tol, _verdict(lip.monotone)))
        bound = lip.apriori_bound if lip.apriori_bound is not None else math.inf
        rows.append(("lipschitz_max_slope", lip.max_slope, bound,
                     _verdict(math.isfinite(lip.max_slope) and lip.max_slope <= bound)))
        if lip.growth is not None:
            rows.append(("lipschitz_growth", lip.growth, ev.growth_tol, _verdict(lip.growth < ev.growth_tol)))
    else:
        logger.info("Time-inhomogeneous instance: the a-priori slope bounds are not checked")

    fit = smooth_fit_check(surface, T2, ev.rel_tol)
    rows.append(("smooth_fit_ux_over_dx", fit.ux_over_dx, math.nan, "INFO"))
    rows.append(("curvature_rel_err_median", fit.curvature_rel_err_median, ev.rel_tol, _verdict(fit.passed)))

    comp = complementarity_check(surface)
    rows.append(("complementarity_misclassified", float(comp.n_misclassified), 0.0, _verdict(comp.passed)))
    rows.append(("pde_residual_active", comp.max_interior_residual, math.nan, "INFO"))

    if spec.stop_below and spec.time_homogeneous:
        t = cfg.resolved_t_list[0]
        b = float(surface.boundary_at(t))
        x = b + 0.5 * (spec.rect_x2 - b)
        hit = hitting_prob_check(spec, surface, t, x, cfg.mc.udot_n_paths, ctx.seed, workers=ctx.workers)
        sigma_b = float(spec.diffusion.sigma(b))
        bias = 2.0 * DISCRETE_MONITORING_SHIFT * sigma_b * math.sqrt(hit.dt_mc) / (spec.rect_x2 - b)
        budget = ev.se_multiplier * hit.std_err + bias
        diff = abs(hit.mc_prob - hit.scale_prob)
        rows.append(("hitting_probability", diff, budget, _verdict(diff <= budget)))

    for k, (t, x) in enumerate(_udot_points(ctx)):
        check = mc_udot_check(spec, surface, t, x, cfg.mc.udot_n_paths, ctx.seed, workers=ctx.workers)
        grid_budget = ctx.two_grid(lambda s: s.interp("u_dot", t, x))
        budget = ev.se_multiplier * check.std_err + grid_budget
        diff = abs(check.mc_value - check.fd_value)
        rows.append((f"udot_point_{k}", diff, budget, _verdict(diff <= budget)))
        if check.escape_fraction > 0.0:
            logger.warning("u_dot point {}: {:.3%} of paths left the grid", k, check.escape_fraction)

    ctx.writer.write_csv("boundary_checks.csv", CHECK_COLUMNS, rows)
    result = StageResult("boundary")
    result.add_rows(rows)
    result.summary = {name: value for name, value, _, _ in rows}
    return result


def _vs_node_doubling(ctx: PipelineContext, t: float) -> CheckRow:
    """Same paths, n_q and 2 n_q quadrature nodes for int V_s."""
    cfg = ctx.config
    horizon = ctx.spec.rect_T1 - t
    n_steps = max(1, int(math.ceil(horizon / cfg.resolved_dt_path - 1e-9)))
    rng = substream(ctx.seed, f"vs-nodes:{t:.9g}", 0)
    paths = sample_pitman_path(n_steps, horizon / n_steps, rng, VS_DOUBLING_PATHS, cfg.mc.bridge_max, ctx.seed, 0)
    args = (t, paths, ctx.surface(), ctx.curve(), ctx.spec, ctx.lamperti())
    base = estimate_Vs_integral(*args, n_q=cfg.mc.n_q)
    doubled = estimate_Vs_integral(*args, n_q=2 * cfg.mc.n_q)
    diff = abs(base.mean - doubled.mean)
    budget = cfg.eval.se_multiplier * max(base.se, doubled.se)
    return (f"intVs_node_doubling:{t:.6g}", diff, budget, _verdict(diff <= budget))


def run_lambda(ctx: PipelineContext) -> StageResult:
    """b_dot from the Monte Carlo Lambda against the finite-difference slope, plus the h-expansion."""
    ctx.require_stop_below("lambda")
    spec, cfg, ev = ctx.spec, ctx.config, ctx.config.eval
    surface, curve, lamperti = ctx.surface(), ctx.curve(), ctx.lamperti()
    result = StageResult("lambda")
    rows, expansion_rows, extra = [], [], []
    span = lamperti.y2 - lamperti.y1
    for t in cfg.resolved_t_list:
        est = estimate_lambda(
            t, surface, curve, spec, cfg.mc.n_paths, cfg.resolved_dt_path, ctx.seed,
            lamperti=lamperti, rho_floor=cfg.mc.rho_floor, bridge_max=cfg.mc.bridge_max,
            n_q=cfg.mc.n_q, T2=cfg.resolved_T2, workers=ctx.workers, batch_size=cfg.mc.batch_size,
        )
        bdot_fd = float(surface.b_dot_at(t))
        tolerance = ev.se_multiplier * est.se_bdot + ctx.two_grid(lambda s: s.b_dot_at(t))
        abs_diff = abs(est.bdot_formula - bdot_fd)
        ok = abs_diff <= tolerance
        if abs(bdot_fd) > 5.0 * tolerance:
            ok = ok and abs_diff / abs(bdot_fd) <= ev.rel_tol
        verdict = _verdict(ok)
        result.verdicts[f"bdot:{t:.6g}"] = verdict
        rows.append((t, est.V1plusV2, est.se_V1plusV2, est.intVs, est.se_intVs, est.Lambda,
                     est.bdot_formula, bdot_fd, abs_diff, tolerance, verdict))

        study = expansion_convergence(t, [h * span for h in ev.h_list], surface, curve, lamperti,
                                      est.Lambda, ev.expansion_tol)
        for row in study.rows:
            expansion_rows.append((t, row.h, row.w_dot, row.ratio if row.ratio is not None else math.nan))
        result.verdicts[f"expansion:{t:.6g}"] = "INFO" if study.skipped else _verdict(study.passed)
        result.summary[f"{t:.6g}"] = {
            "Lambda": est.Lambda, "se_Lambda": est.se_Lambda, "bdot_formula": est.bdot_formula,
            "bdot_fd": bdot_fd, "crossed_fraction": est.crossed_fraction,
            "small_rho_fraction": est.small_rho_fraction, "high_variance": est.high_variance,
            "expansion_final_error": study.final_error,
        }
        if not spec.time_homogeneous:
            extra.append(_vs_node_doubling(ctx, t))

    ctx.writer.write_csv("lambda.csv", LAMBDA_COLUMNS, rows)
    ctx.writer.write_csv("lambda_expansion.csv", EXPANSION_COLUMNS, expansion_rows)
    if extra:
        ctx.writer.write_csv("lambda_checks.csv", CHECK_COLUMNS, extra)
        result.add_rows(extra)
    return result


def run_vh(ctx: PipelineContext) -> StageResult:
    """Pre-limit functional V_h against the solver's w_dot at c(t) + h."""
    ctx.require_stop_below("vh")
    spec, cfg, ev = ctx.spec, ctx.config, ctx.config.eval
    surface, curve, lamperti = ctx.surface(), ctx.curve(), ctx.lamperti()
    h = ev.vh_h * (lamperti.y2 - lamperti.y1)
    result = StageResult("vh")
    rows = []
    for t in cfg.resolved_t_list:
        est = estimate_Vh_streamed(
            t, h, surface, curve, spec, cfg.resolved_vh_n_paths, cfg.resolved_dt_path, ctx.seed,
            lamperti=lamperti, bridge_max=cfg.mc.bridge_max, n_s=cfg.mc.n_q,
            workers=ctx.workers, batch_size=cfg.mc.batch_size,
        )
        x = float(lamperti.f_inv(float(curve.c_at(t)) + h))
        w_dot = float(surface.interp("u_dot", t, x))
        tolerance = ev.se_multiplier * est.std_err + ctx.two_grid(lambda s: s.interp("u_dot", t, x))
        abs_diff = abs(est.value - w_dot)
        verdict = _verdict(abs_diff <= tolerance)
        result.verdicts[f"vh:{t:.6g}"] = verdict
        rows.append((t, h, est.value, est.std_err, w_dot, abs_diff, tolerance, est.p_B1, est.p_B2, verdict))
    ctx.writer.write_csv("vh.csv", VH_COLUMNS, rows)
    result.summary = {"h": h, "n_paths": cfg.resolved_vh_n_paths}
    return result


def run_verify_stefan(ctx: PipelineContext) -> StageResult:
    """Stefan conditions on the solved surface; stefan_report.csv and stefan_report.txt."""
    ev = ctx.config.eval
    report = verify_stefan(
        ctx.surface(), ctx.config.resolved_T2, ctx.refined(), t_offsets=ev.terminal_t_offsets,
        velocity_rel_tol=ev.velocity_rel_tol, velocity_pass_fraction=ev.velocity_pass_fraction,
        terminal_rel_tol=ev.terminal_rel_tol, terminal_substeps=ev.terminal_substeps, min_order=ev.min_order,
    )
    rows = [(r.condition, r.ident, r.residual, r.budget, r.verdict) for r in report.rows]
    ctx.writer.write_csv("stefan_report.csv", STEFAN_COLUMNS, rows)

    terminal = [(t.ident, t.t, t.lhs, t.rhs, t.rel_gap) for t in report.terminal_tests]
    text = "\n".join([
        report_header("Stefan problem verification"),
        "PDE residual: " + ", ".join(f"{k}={v:.6g}" for k, v in report.pde_residual_stats.items()),
        "Boundary value residual: " + ", ".join(f"{k}={v:.6g}" for k, v in report.bc_residual_stats.items()),
        "Velocity residual: " + ", ".join(f"{k}={v:.6g}" for k, v in report.ode_residual_stats.items()),
        "",
        "Terminal weak limit",
        format_table(("xi", "t", "lhs", "rhs", "rel_gap"), terminal),
        "",
        verdicts_to_string(report.verdicts),
    ])
    ctx.writer.write_text("stefan_report.txt", text)
    result = StageResult("verify-stefan", dict(report.verdicts))
    result.summary = {
        "pde": dict(report.pde_residual_stats),
        "boundary_value": dict(report.bc_residual_stats),
        "velocity": dict(report.ode_residual_stats),
        "terminal": [asdict(t) for t in report.terminal_tests],
    }
    return result


def run_bessel_check(ctx: PipelineContext) -> StageResult:
    """Distributional suite for the Pitman/Bessel sampler; bessel_report.txt."""
    results = run_bessel_suite(ctx.config.mc.bessel_n_paths, ctx.seed, ctx.workers)
    table = format_table(
        ("test", "statistic", "threshold", "verdict", "detail"),
        [(r.name, r.statistic, r.threshold, r.verdict, r.detail) for r in results],
    )
    verdicts = {r.name: r.verdict for r in results}
    ctx.writer.write_text("bessel_report.txt", "\n".join([
        report_header("Bessel / Pitman sampler suite"),
        f"n_paths: {ctx.config.mc.bessel_n_paths}  seed: {ctx.seed}",
        "",
        table,
        "",
        verdicts_to_string(verdicts),
    ]))
    result = StageResult("bessel-check", verdicts)
    result.summary = {r.name: {"statistic": r.statistic, "threshold": r.threshold} for r in results}
    return result


STAGES: Dict[str, Callable[[PipelineContext], StageResult]] = {
    "solve": run_solve,
    "boundary": run_boundary,
    "lambda": run_lambda,
    "vh": run_vh,
    "verify-stefan": run_verify_stefan,
    "bessel-check": run_bessel_check,
}
