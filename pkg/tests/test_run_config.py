import pytest

from free_boundary_lab.core.exceptions import ConfigError
from free_boundary_lab.core.run_config import (
    config_from_dict,
    parse_config,
    required_keys,
    serialize_config,
    with_overrides,
)
from free_boundary_lab.utils.paths import CONFIG_DIR
from tests.conftest import write_config

MINIMAL = """\
problem:
  kind: put
  K: 1.0
  r: 0.06
  delta: 0.02
  sigma: 0.4
  T: 1.0
  T1: 0.8
  x1: 0.55
  x2: 1.3
mc:
  seed: 7
"""


def test_minimal_config_fills_defaults(tmp_path):
    config = parse_config(write_config(tmp_path / "run.yaml", MINIMAL))
    assert config.grid.N_t == 400 and config.grid.N_x == 400
    assert config.mc.n_paths == 200_000
    assert config.resolved_T2 == pytest.approx(0.64)
    assert config.resolved_t_list == pytest.approx([0.16, 0.32, 0.48])
    assert config.resolved_dt_path == pytest.approx(1.6e-4)
    assert config.resolved_vh_n_paths == config.mc.n_paths
    assert config.eval.terminal_rel_tol == pytest.approx(0.05)
    assert config.eval.terminal_substeps == 50


def test_empty_file_lists_required_keys(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config(write_config(tmp_path / "empty.yaml", ""))
    for key in required_keys():
        assert key in str(info.value)
    assert "mc.seed" in required_keys()


def test_missing_seed_names_the_key(tmp_path):
    text = MINIMAL.replace("mc:\n  seed: 7\n", "")
    with pytest.raises(ConfigError, match=r"mc\.seed"):
        parse_config(write_config(tmp_path / "run.yaml", text))


def test_duplicate_key_is_rejected(tmp_path):
    text = MINIMAL.replace("  K: 1.0\n", "  K: 1.0\n  K: 2.0\n")
    with pytest.raises(ConfigError, match="Duplicate key 'K'"):
        parse_config(write_config(tmp_path / "run.yaml", text))


def test_unknown_key_and_section_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="strike"):
        parse_config(write_config(tmp_path / "a.yaml", MINIMAL + "grid:\n  strike: 3\n"))
    with pytest.raises(ConfigError, match="plots"):
        parse_config(write_config(tmp_path / "b.yaml", MINIMAL + "plots:\n  dpi: 300\n"))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.yaml")


def test_t_list_at_T1_is_rejected(tmp_path):
    text = MINIMAL + "eval:\n  t_list: [0.8]\n"
    with pytest.raises(ConfigError, match="t_list"):
        parse_config(write_config(tmp_path / "run.yaml", text))


def test_T2_must_be_below_T1(tmp_path):
    with pytest.raises(ConfigError, match="T2"):
        parse_config(write_config(tmp_path / "run.yaml", MINIMAL + "eval:\n  T2: 0.9\n"))


def test_h_list_must_decrease(tmp_path):
    text = MINIMAL + "eval:\n  h_list: [0.01, 0.02]\n"
    with pytest.raises(ConfigError, match="h_list"):
        parse_config(write_config(tmp_path / "run.yaml", text))


def test_grid_margin_is_checked(tmp_path):
    text = MINIMAL + "grid:\n  x_lo: 0.54\n"
    with pytest.raises(ConfigError, match="x_lo"):
        parse_config(write_config(tmp_path / "run.yaml", text))


def test_serialize_round_trip(tmp_path):
    config = parse_config(write_config(tmp_path / "run.yaml", MINIMAL + "eval:\n  t_list: [0.1, 0.2]\n"))
    again = parse_config(write_config(tmp_path / "again.yaml", serialize_config(config)))
    assert again == config


def test_overrides():
    config = config_from_dict(
        {"problem": dict(kind="put", K=1.0, r=0.06, delta=0.02, sigma=0.4, T=1.0, T1=0.8, x1=0.55, x2=1.3),
         "mc": {"seed": 1}}
    )
    changed = with_overrides(config, seed=99, out="elsewhere")
    assert changed.mc.seed == 99
    assert changed.output.dir == "elsewhere"
    assert with_overrides(config) == config


@pytest.mark.parametrize(
    "name", ["config.yaml", "put_dividend_dominant.yaml", "time_inhomogeneous.yaml", "call.yaml"]
)
def test_shipped_configs_parse(name):
    config = parse_config(f"{CONFIG_DIR}/{name}")
    assert config.mc.seed >= 0
