import os

import pytest
import yaml

from free_boundary_lab.core.run_config import parse_config
from free_boundary_lab.interfaces.cli import (
    EXIT_CONFIG,
    EXIT_FAIL,
    EXIT_PASS,
    STOP_BELOW_STAGES,
    SUBCOMMANDS,
    stages_for,
)
from free_boundary_lab.main import build_parser, main
from free_boundary_lab.utils.paths import APP_CONFIG_FPATH, CONFIG_DIR
from tests.conftest import write_config

SMALL_PUT = """\
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
grid:
  N_t: 64
  N_x: 64
  refine: false
mc:
  seed: 11
eval:
  binomial_steps: 200
  binomial_tol: 0.05
"""


def _small_config(tmp_path, text=SMALL_PUT, name="run.yaml"):
    return str(write_config(tmp_path / name, text))


def test_parser_knows_every_subcommand():
    parser = build_parser()
    for name in SUBCOMMANDS:
        assert parser.parse_args([name]).subcommand == name
    args = parser.parse_args(["solve", "--seed", "3", "--workers", "2", "--quiet", "--out", "x"])
    assert (args.seed, args.workers, args.quiet, args.out) == (3, 2, True, "x")
    assert args.config == APP_CONFIG_FPATH
    with pytest.raises(SystemExit):
        parser.parse_args(["price"])


def test_missing_seed_exits_with_config_error(tmp_path):
    text = SMALL_PUT.replace("mc:\n  seed: 11\n", "")
    assert main(["solve", "--config", _small_config(tmp_path, text), "--quiet"]) == EXIT_CONFIG


def test_empty_and_missing_files_exit_with_config_error(tmp_path):
    assert main(["solve", "--config", _small_config(tmp_path, ""), "--quiet"]) == EXIT_CONFIG
    assert main(["solve", "--config", str(tmp_path / "nope.yaml"), "--quiet"]) == EXIT_CONFIG


def test_t_list_at_the_rectangle_edge_is_rejected(tmp_path):
    text = SMALL_PUT + "  t_list: [0.8]\n"
    assert main(["lambda", "--config", _small_config(tmp_path, text), "--quiet"]) == EXIT_CONFIG


def test_bad_worker_count_exits_with_config_error(tmp_path, monkeypatch):
    config = _small_config(tmp_path)
    assert main(["solve", "--config", config, "--workers", "0", "--quiet"]) == EXIT_CONFIG
    monkeypatch.setenv("FBL_WORKERS", "many")
    assert main(["solve", "--config", config, "--quiet"]) == EXIT_CONFIG


def test_solve_writes_the_artifacts(tmp_path):
    out = tmp_path / "out"
    code = main(["solve", "--config", _small_config(tmp_path), "--out", str(out), "--seed", "5", "--quiet"])
    assert code in (EXIT_PASS, EXIT_FAIL)
    for name in ("surface.csv", "boundary.csv", "solve_checks.csv", "run_report.yaml"):
        assert (out / name).is_file()
    assert (out / "surface.csv").read_text().splitlines()[0] == "t,x,v,u"
    assert (out / "boundary.csv").read_text().splitlines()[0] == "t,b,b_dot_fd"
    report = yaml.safe_load((out / "run_report.yaml").read_text())
    assert report["schema_version"] == "1"
    assert report["subcommand"] == "solve"
    assert report["seed"] == 5
    assert set(report["stages"]) == {"solve"}
    assert report["verdict"] == ("PASS" if code == EXIT_PASS else "FAIL")
    assert "numpy" in report["versions"]


def test_solve_is_reproducible(tmp_path):
    config = _small_config(tmp_path)
    first, second = tmp_path / "a", tmp_path / "b"
    main(["solve", "--config", config, "--out", str(first), "--quiet"])
    main(["solve", "--config", config, "--out", str(second), "--quiet"])
    for name in ("surface.csv", "boundary.csv", "solve_checks.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_lambda_on_a_call_is_a_config_error(tmp_path):
    text = (
        SMALL_PUT.replace("kind: put", "kind: call")
        .replace("r: 0.06", "r: 0.02")
        .replace("delta: 0.02", "delta: 0.06")
        .replace("x1: 0.55", "x1: 1.02")
        .replace("x2: 1.3", "x2: 3.0")
    )
    config = _small_config(tmp_path, text)
    assert main(["lambda", "--config", config, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG
    assert main(["vh", "--config", config, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG


def test_all_skips_the_stop_below_stages_for_a_call():
    config = parse_config(os.path.join(CONFIG_DIR, "call.yaml"))
    names, skipped = stages_for("all", config)
    assert skipped == list(STOP_BELOW_STAGES)
    assert "lambda" not in names and "verify-stefan" in names
    put_names, put_skipped = stages_for("all", parse_config(APP_CONFIG_FPATH))
    assert put_skipped == [] and "lambda" in put_names
    assert stages_for("boundary", config) == (["boundary"], [])


@pytest.mark.slow
def test_all_on_the_default_put(tmp_path):
    out = tmp_path / "all"
    assert main(["all", "--out", str(out), "--workers", "4", "--quiet"]) == EXIT_PASS
    for name in ("boundary.csv", "lambda.csv", "stefan_report.csv", "bessel_report.txt", "run_report.yaml"):
        assert (out / name).is_file()
