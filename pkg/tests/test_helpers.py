import pytest

from free_boundary_lab.core.exceptions import ConfigError
from free_boundary_lab.utils.helpers import WORKERS_ENV_VAR, load_yaml_config, resolve_workers
from free_boundary_lab.utils.text_helpers import format_number, format_table, verdicts_to_string
from tests.conftest import write_config


def test_load_yaml_config(tmp_path):
    assert load_yaml_config(write_config(tmp_path / "a.yaml", "grid:\n  N_t: 100\n")) == {"grid": {"N_t": 100}}
    assert load_yaml_config(write_config(tmp_path / "b.yaml", "")) == {}


def test_load_yaml_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_yaml_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        load_yaml_config(write_config(tmp_path / "list.yaml", "- 1\n- 2\n"))
    with pytest.raises(ConfigError):
        load_yaml_config(write_config(tmp_path / "bad.yaml", "grid: [1, 2\n"))


def test_duplicate_nested_key_names_both_lines(tmp_path):
    text = "mc:\n  seed: 1\n  n_paths: 10\n  seed: 2\n"
    with pytest.raises(ConfigError, match=r"line 4 \(first defined at line 2\)"):
        load_yaml_config(write_config(tmp_path / "dup.yaml", text))


def test_resolve_workers(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV_VAR, "3")
    assert resolve_workers(5) == 5
    assert resolve_workers() == 3
    monkeypatch.setenv(WORKERS_ENV_VAR, "many")
    with pytest.raises(ConfigError):
        resolve_workers()
    monkeypatch.delenv(WORKERS_ENV_VAR)
    with pytest.raises(ConfigError):
        resolve_workers(0)


def test_format_number_keeps_full_precision():
    assert float(format_number(0.1 + 0.2)) == 0.1 + 0.2
    assert format_number(float("nan")) == "nan"
    assert format_number(None) == ""
    assert format_number(True) == "true"


def test_format_table_and_verdicts():
    table = format_table(("name", "value"), [("a", 1.0), ("longer", 0.123456789)])
    lines = table.splitlines()
    assert lines[0].startswith("name")
    assert set(lines[1].replace(" ", "")) == {"-"}
    assert "0.123457" in lines[3]
    summary = verdicts_to_string({"x": "PASS", "y": "INFO"})
    assert summary.endswith("overall: PASS")
    assert verdicts_to_string({"x": "FAIL"}).endswith("overall: FAIL")
