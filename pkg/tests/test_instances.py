from types import SimpleNamespace

import pytest

from free_boundary_lab.core.exceptions import ConfigError
from free_boundary_lab.core.instances import INSTANCE_BUILDERS, build_problem
from tests.conftest import CALL, INHOMOGENEOUS, PUT


def _problem(kind, params):
    return SimpleNamespace(kind=kind, **params)


def test_every_kind_is_registered():
    assert set(INSTANCE_BUILDERS) == {"put", "call", "custom_time_inhomogeneous"}


def test_put_orientation():
    spec = build_problem(_problem("put", PUT))
    assert spec.name == "put"
    assert spec.stop_below
    assert spec.time_homogeneous


def test_call_orientation():
    spec = build_problem(_problem("call", CALL))
    assert not spec.stop_below
    assert spec.gain.kink == 1.0


def test_time_inhomogeneous_rate():
    spec = build_problem(_problem("custom_time_inhomogeneous", INHOMOGENEOUS))
    assert not spec.time_homogeneous
    assert float(spec.discount.r(0.5, 1.0)) == pytest.approx(0.05 * 1.5)
    assert float(spec.diffusion.mu(0.5, 2.0)) == pytest.approx((0.075 - 0.02) * 2.0)


def test_unknown_kind():
    with pytest.raises(ConfigError, match="unknown instance"):
        build_problem(_problem("bermudan", PUT))


def test_invalid_parameters_become_config_errors():
    with pytest.raises(ConfigError):
        build_problem(_problem("call", {**CALL, "delta": 0.0}))
