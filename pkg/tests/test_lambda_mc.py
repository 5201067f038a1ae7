import math

import numpy as np
import pytest

from free_boundary_lab.core.bessel import sample_pitman_path
from free_boundary_lab.core.exceptions import BoundaryEscapeError, DomainError
from free_boundary_lab.core.lambda_mc import (
    PathFunctionals,
    build_boundary_curve_y,
    estimate_lambda,
    estimate_Vh,
    estimate_Vh_streamed,
    estimate_Vs_integral,
    expansion_convergence,
    lamperti_for,
)
from free_boundary_lab.core.model import LampertiMap
from free_boundary_lab.services.random_streams import substream


def test_rescaled_boundary_stays_inside_the_rectangle(put_curve, put_lamperti, put_spec):
    inside = put_curve.t_nodes <= put_spec.rect_T1 + 1e-12
    assert put_curve.t_nodes[inside][-1] == pytest.approx(put_spec.rect_T1)
    assert np.all(put_curve.c[inside] > put_lamperti.y1)
    assert np.all(put_curve.c[inside] < put_lamperti.y2)
    assert np.all(np.isfinite(put_curve.c_dot))


def test_boundary_below_the_rectangle_escapes(put_surface, put_spec):
    grid = put_surface.grid
    narrow = LampertiMap(
        put_spec.diffusion, 0.95, 1.3, table_lo=float(grid.x_nodes[0]), table_hi=float(grid.x_nodes[-1])
    )
    with pytest.raises(BoundaryEscapeError):
        build_boundary_curve_y(put_surface, narrow)


def test_path_functionals_reject_stop_above(call_spec, call_surface, put_curve, put_lamperti):
    with pytest.raises(DomainError):
        PathFunctionals(call_spec, call_surface, put_curve, put_lamperti)


def test_running_term_vanishes_when_time_homogeneous(put_surface, put_curve, put_spec):
    paths = sample_pitman_path(200, 2e-3, substream(3, "vs", 0), n_paths=50)
    result = estimate_Vs_integral(0.4, paths, put_surface, put_curve, put_spec)
    assert result.mean == 0.0 and result.se == 0.0
    assert np.all(result.per_path == 0.0)


@pytest.mark.parametrize("t", [0.8, 0.9, -0.1])
def test_lambda_rejects_times_outside_the_window(t, put_surface, put_curve, put_spec):
    with pytest.raises(DomainError):
        estimate_lambda(t, put_surface, put_curve, put_spec, n_paths=10, dt_path=0.01, seed=1)


def test_lambda_is_deterministic_across_worker_counts(put_surface, put_curve, put_spec):
    kwargs = dict(n_paths=400, dt_path=0.01, seed=7, batch_size=100)
    serial = estimate_lambda(0.4, put_surface, put_curve, put_spec, workers=1, **kwargs)
    threaded = estimate_lambda(0.4, put_surface, put_curve, put_spec, workers=3, **kwargs)
    assert serial.Lambda == threaded.Lambda
    assert serial.se_Lambda == threaded.se_Lambda
    assert math.isfinite(serial.bdot_formula)
    assert serial.intVs == 0.0
    assert serial.Lambda == pytest.approx(serial.V1 + serial.V2)
    assert 0.0 <= serial.crossed_fraction <= 1.0
    assert serial.dt_path == pytest.approx(0.01)


def test_lambda_seed_changes_the_estimate(put_surface, put_curve, put_spec):
    a = estimate_lambda(0.4, put_surface, put_curve, put_spec, n_paths=200, dt_path=0.02, seed=1)
    b = estimate_lambda(0.4, put_surface, put_curve, put_spec, n_paths=200, dt_path=0.02, seed=2)
    assert a.Lambda != b.Lambda


@pytest.mark.slow
def test_lambda_matches_the_solver_slope(put_surface_refined, put_spec):
    lamperti = lamperti_for(put_surface_refined)
    curve = build_boundary_curve_y(put_surface_refined, lamperti)
    estimate = estimate_lambda(
        0.4, put_surface_refined, curve, put_spec, n_paths=20000, dt_path=1e-3, seed=11, lamperti=lamperti, workers=2
    )
    fd = float(put_surface_refined.b_dot_at(0.4))
    assert abs(estimate.bdot_formula - fd) <= 4.0 * estimate.se_bdot + 0.25 * abs(fd)


def test_vh_event_probabilities(put_surface, put_curve, put_lamperti, put_spec):
    h = 0.1 * (put_lamperti.y2 - put_lamperti.y1)
    estimate = estimate_Vh_streamed(
        0.4, h, put_surface, put_curve, put_spec, n_paths=300, dt_path=0.01, seed=5, batch_size=100
    )
    assert 0.0 <= estimate.p_B1 <= 1.0
    assert 0.0 <= estimate.p_B2 <= 1.0
    assert estimate.p_B1 + estimate.p_B2 <= 1.0
    assert estimate.n_paths == 300
    assert math.isfinite(estimate.value) and estimate.std_err >= 0.0


def test_vh_rejects_offsets_outside_the_rectangle(put_surface, put_curve, put_lamperti, put_spec):
    for h in (0.0, put_lamperti.y2 - put_lamperti.y1):
        with pytest.raises(DomainError):
            estimate_Vh_streamed(0.4, h, put_surface, put_curve, put_spec, n_paths=10, dt_path=0.01, seed=5)


def test_expansion_requires_decreasing_offsets(put_surface, put_curve, put_lamperti):
    with pytest.raises(DomainError):
        expansion_convergence(0.4, [0.01, 0.02], put_surface, put_curve, put_lamperti, 1.0, 0.1)
    with pytest.raises(DomainError):
        expansion_convergence(0.4, [0.02], put_surface, put_curve, put_lamperti, 1.0, 0.1)


def test_expansion_is_skipped_when_lambda_vanishes(put_surface, put_curve, put_lamperti):
    study = expansion_convergence(0.4, [0.04, 0.02, 0.01], put_surface, put_curve, put_lamperti, 0.0, 0.1)
    assert study.skipped and not study.passed
    assert [row.ratio for row in study.rows] == [None, None, None]
    assert [row.h for row in study.rows] == [0.04, 0.02, 0.01]


def test_vh_on_supplied_paths_matches_the_streamed_estimate(put_surface, put_curve, put_lamperti, put_spec):
    h = 0.1 * (put_lamperti.y2 - put_lamperti.y1)
    streamed = estimate_Vh_streamed(
        0.4, h, put_surface, put_curve, put_spec, n_paths=200, dt_path=0.01, seed=9, batch_size=100
    )
    paths = [
        sample_pitman_path(40, 0.4 / 40, substream(9, f"vh:{0.4:.9g}:{h:.9g}", i), 100, True, 9, i) for i in range(2)
    ]
    direct = estimate_Vh(0.4, h, paths, put_surface, put_curve, put_spec)
    assert direct.n_paths == 200
    assert direct.value == pytest.approx(streamed.value, rel=1e-12, abs=1e-15)
    assert direct.p_B1 == streamed.p_B1 and direct.p_B2 == streamed.p_B2


@pytest.fixture(scope="module")
def inhomogeneous_curve(inhomogeneous_surface):
    lamperti = lamperti_for(inhomogeneous_surface)
    return lamperti, build_boundary_curve_y(inhomogeneous_surface, lamperti)


def test_running_term_enters_lambda_for_a_time_dependent_rate(
    inhomogeneous_spec, inhomogeneous_surface, inhomogeneous_curve
):
    lamperti, curve = inhomogeneous_curve
    estimate = estimate_lambda(
        0.4, inhomogeneous_surface, curve, inhomogeneous_spec,
        n_paths=400, dt_path=0.01, seed=7, lamperti=lamperti, batch_size=100,
    )
    assert math.isfinite(estimate.intVs) and estimate.intVs != 0.0
    assert estimate.se_intVs > 0.0
    assert estimate.Lambda == pytest.approx(estimate.V1 + estimate.V2 + estimate.intVs, rel=1e-9, abs=1e-12)
    assert math.isfinite(estimate.bdot_formula)


def test_running_term_is_stable_under_quadrature_doubling(
    inhomogeneous_spec, inhomogeneous_surface, inhomogeneous_curve
):
    lamperti, curve = inhomogeneous_curve
    paths = sample_pitman_path(100, 0.004, substream(13, "vs", 0), n_paths=200)
    coarse = estimate_Vs_integral(0.4, paths, inhomogeneous_surface, curve, inhomogeneous_spec, lamperti, n_q=64)
    fine = estimate_Vs_integral(0.4, paths, inhomogeneous_surface, curve, inhomogeneous_spec, lamperti, n_q=128)
    assert coarse.mean != 0.0 and np.all(np.isfinite(coarse.per_path))
    assert abs(coarse.mean - fine.mean) <= 3.0 * coarse.se


@pytest.mark.slow
def test_lambda_matches_the_solver_slope_for_a_time_dependent_rate(
    inhomogeneous_spec, inhomogeneous_surface, inhomogeneous_curve
):
    lamperti, curve = inhomogeneous_curve
    estimate = estimate_lambda(
        0.4, inhomogeneous_surface, curve, inhomogeneous_spec,
        n_paths=20000, dt_path=1e-3, seed=11, lamperti=lamperti, workers=2,
    )
    fd = float(inhomogeneous_surface.b_dot_at(0.4))
    assert estimate.intVs != 0.0
    assert abs(estimate.bdot_formula - fd) <= 4.0 * estimate.se_bdot + 0.25 * abs(fd)
