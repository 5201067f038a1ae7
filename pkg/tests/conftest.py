"""Shared fixtures: default instances and coarse solved surfaces (solved once per session)."""

import pytest

from free_boundary_lab.core.instances import (
    american_call_spec,
    american_put_spec,
    time_inhomogeneous_put_spec,
)
from free_boundary_lab.core.lambda_mc import build_boundary_curve_y, lamperti_for
from free_boundary_lab.core.pde_solver import Grid, solve_and_extract

PUT = dict(K=1.0, r=0.06, delta=0.02, sigma=0.4, T=1.0, T1=0.8, x1=0.55, x2=1.3)
PUT_DIVIDEND = dict(K=1.0, r=0.06, delta=0.08, sigma=0.4, T=1.0, T1=0.8, x1=0.35, x2=0.74)
CALL = dict(K=1.0, r=0.02, delta=0.06, sigma=0.4, T=1.0, T1=0.8, x1=1.02, x2=3.0)
INHOMOGENEOUS = dict(K=1.0, r=0.05, delta=0.02, sigma=0.4, T=1.0, T1=0.8, x1=0.55, x2=1.3)


@pytest.fixture(scope="session")
def put_spec():
    return american_put_spec(**PUT)


@pytest.fixture(scope="session")
def put_dividend_spec():
    return american_put_spec(**PUT_DIVIDEND)


@pytest.fixture(scope="session")
def call_spec():
    return american_call_spec(**CALL)


@pytest.fixture(scope="session")
def inhomogeneous_spec():
    return time_inhomogeneous_put_spec(**INHOMOGENEOUS)


@pytest.fixture(scope="session")
def put_surface(put_spec):
    return solve_and_extract(put_spec, Grid.build(put_spec, 120, 120), tol_factor=1e-11)


@pytest.fixture(scope="session")
def put_surface_refined(put_spec, put_surface):
    return solve_and_extract(put_spec, put_surface.grid.refined(put_spec), tol_factor=1e-11)


@pytest.fixture(scope="session")
def put_dividend_surface(put_dividend_spec):
    return solve_and_extract(put_dividend_spec, Grid.build(put_dividend_spec, 120, 120), tol_factor=1e-11)


@pytest.fixture(scope="session")
def call_surface(call_spec):
    return solve_and_extract(call_spec, Grid.build(call_spec, 120, 120), tol_factor=1e-11)


@pytest.fixture(scope="session")
def inhomogeneous_surface(inhomogeneous_spec):
    return solve_and_extract(inhomogeneous_spec, Grid.build(inhomogeneous_spec, 120, 120), tol_factor=1e-11)


@pytest.fixture(scope="session")
def put_lamperti(put_surface):
    return lamperti_for(put_surface)


@pytest.fixture(scope="session")
def put_curve(put_surface, put_lamperti):
    return build_boundary_curve_y(put_surface, put_lamperti)


def write_config(path, text):
    path.write_text(text, encoding="utf-8")
    return path
