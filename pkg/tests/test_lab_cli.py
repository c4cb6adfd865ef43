import argparse
import json
from pathlib import Path

import pytest

from app.core.errors import NumericalFlagError
from app.schemas.domain import ExperimentConfig
from app.workers import lab_cli


def _write_config(tmp_path, payload) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def _last_status(capsys) -> dict:
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_parse_seed_range() -> None:
    assert lab_cli.parse_seed_range("2..5") == (2, 5)
    assert lab_cli.parse_seed_range("0..200") == (0, 200)
    with pytest.raises(argparse.ArgumentTypeError):
        lab_cli.parse_seed_range("7")
    with pytest.raises(argparse.ArgumentTypeError):
        lab_cli.parse_seed_range("a..b")


def test_build_parser_has_every_experiment() -> None:
    parser = lab_cli.build_parser()
    args = parser.parse_args(["identity", "--seed-range", "0..4", "--grid-n", "128", "--threads", "2"])
    assert args.command == "identity"
    assert args.seed_range == (0, 4)
    assert args.grid_n == 128
    assert args.threads == 2
    with pytest.raises(SystemExit):
        parser.parse_args(["identity", "--seed-range", "4"])


def test_run_productgauss_exits_ok(tmp_path, capsys) -> None:
    config = _write_config(tmp_path, {"n_mc": 2000, "rhos": [0.5]})
    out = tmp_path / "out"
    code = lab_cli.main(["productgauss", "--config", config, "--seed-range", "0..1", "--out", str(out)])
    assert code == lab_cli.EXIT_OK
    status = _last_status(capsys)
    assert status["status"] == "ok"
    assert status["experiment"] == "productgauss"
    assert (out / "productgauss.csv").exists()
    assert (out / "productgauss_summary.json").exists()


@pytest.mark.parametrize(
    "payload",
    [
        {"bands": [[1.0, 0.0]]},
        {"measure": {"atoms": [[1.0, 0.0]], "weights": [1.0]}},
        {"measure": {"builtin": "sphere", "params": {"M": 4}}},
        {"R": -1.0},
        ["not", "an", "object"],
    ],
)
def test_bad_config_exits_with_config_code(tmp_path, capsys, payload) -> None:
    config = _write_config(tmp_path, payload)
    code = lab_cli.main(["kacrice", "--config", config, "--out", str(tmp_path / "out")])
    assert code == lab_cli.EXIT_CONFIG
    assert _last_status(capsys)["status"] == "config_error"


def test_missing_config_and_empty_seed_range(tmp_path) -> None:
    assert lab_cli.main(["kacrice", "--config", str(tmp_path / "missing.json")]) == lab_cli.EXIT_CONFIG
    assert lab_cli.main(["kacrice", "--seed-range", "5..5"]) == lab_cli.EXIT_CONFIG


def test_numerical_flags_exit_code(monkeypatch, capsys) -> None:
    monkeypatch.setattr(lab_cli, "run_experiment", lambda cfg: {"experiment": cfg.experiment, "flagged_seeds": [3]})
    assert lab_cli.main(["identity"]) == lab_cli.EXIT_NUMERICAL_FLAG
    assert _last_status(capsys)["status"] == "numerical_flag"

    def _raise(cfg):
        raise NumericalFlagError("simplex stalled")

    monkeypatch.setattr(lab_cli, "run_experiment", _raise)
    assert lab_cli.main(["couple"]) == lab_cli.EXIT_NUMERICAL_FLAG


def test_acceptance_configs_validate() -> None:
    configs = sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.json"))
    assert configs
    for path in configs:
        cfg = ExperimentConfig.model_validate({**json.loads(path.read_text(encoding="utf-8")), "experiment": path.stem})
        assert cfg.experiment in lab_cli.RUNNERS
