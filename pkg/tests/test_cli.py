from pathlib import Path

import pandas as pd
import pytest
import yaml

from trusttune.cli import build_parser, main
from trusttune.errors import ReportError
from trusttune.report import ReportGenerator

from conftest import TINY_OVERRIDES


@pytest.fixture(autouse=True)
def no_figure_export(monkeypatch):
    def placeholder(self, figure, path):
        Path(path).write_text("<svg/>", encoding="utf-8")
        return Path(path)

    monkeypatch.setattr(ReportGenerator, "_save_figure", placeholder)


@pytest.fixture
def config_file(tmp_path):
    nested = {}
    for key, value in TINY_OVERRIDES.items():
        section, name = key.split(".")
        nested.setdefault(section, {})[name] = value
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(nested), encoding="utf-8")
    return str(path)


def test_every_subcommand_is_registered():
    parser = build_parser()
    for command in ["pretrain", "finetune", "stability", "chain", "cycle", "probe-matrix", "theory"]:
        assert parser.parse_args([command]).command == command
    assert parser.parse_args(["report", "a", "b"]).run_dirs == ["a", "b"]


def test_pretrain_then_finetune(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["pretrain", "--config", config_file, "--out", str(out)]) == 0
    assert (out / "pretrain" / "encoder.json").exists()
    assert main(["finetune", "--config", config_file, "--out", str(out), "--seeds", "3", "--jobs", "1"]) == 0
    table = pd.read_csv(out / "finetune" / "r3f-keyword_a" / "results.csv", dtype={"seed": str})
    assert set(table["seed"]) == {"3", "max", "median"}
    assert (out / "logs" / "trusttune.log").exists()
    assert main(["report", "--out", str(out), str(out / "finetune")]) == 0
    assert (out / "report" / "report.csv").exists()


def test_missing_checkpoint_exits_with_config_error(config_file, tmp_path, capsys):
    assert main(["finetune", "--config", config_file, "--out", str(tmp_path / "empty")]) == 2
    assert "error:" in capsys.readouterr().err


def test_stability_with_one_seed_exits_2(config_file, tmp_path):
    out = str(tmp_path / "out")
    assert main(["pretrain", "--config", config_file, "--out", out]) == 0
    assert main(["stability", "--config", config_file, "--out", out, "--seeds", "0"]) == 2


def test_theory_runs_and_rejects_zero_trials(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["theory", "--config", config_file, "--out", str(out)]) == 0
    assert (out / "theory" / "theory.csv").exists()

    broken = tmp_path / "broken.yaml"
    broken.write_text("theory:\n  trials: 0\n", encoding="utf-8")
    assert main(["theory", "--config", str(broken), "--out", str(out)]) == 2


@pytest.mark.parametrize("argv", [
    ["theory", "--config", "does-not-exist.yaml"],
    ["theory", "--seeds", "1,x"],
    ["theory", "--jobs", "0"],
])
def test_bad_arguments_exit_2(argv, tmp_path):
    assert main([*argv, "--out", str(tmp_path)]) == 2


def test_unknown_config_key_exits_2(tmp_path):
    path = tmp_path / "typo.yaml"
    path.write_text("optim:\n  lr: 0.1\n  learning_rate: 0.1\n", encoding="utf-8")
    assert main(["theory", "--config", str(path), "--out", str(tmp_path)]) == 2


def test_failing_theory_check_exits_3(tmp_path, monkeypatch):
    import trusttune.runner as runner

    real = runner.lipschitz_bound_experiment

    def broken(dim, trials, rng):
        frame = real(dim, trials, rng)
        frame.loc[0, "passed"] = False
        return frame

    monkeypatch.setattr(runner, "lipschitz_bound_experiment", broken)
    path = tmp_path / "small.yaml"
    path.write_text("theory:\n  trials: 3\n  mc_samples: 1000\n", encoding="utf-8")
    assert main(["theory", "--config", str(path), "--out", str(tmp_path / "out")]) == 3
    assert (tmp_path / "out" / "theory" / "failures.csv").exists()


def test_failed_figure_export_exits_1(config_file, tmp_path, monkeypatch, capsys):
    out = str(tmp_path / "out")
    assert main(["pretrain", "--config", config_file, "--out", out]) == 0

    def broken(self, figure, path):
        raise ReportError(f"could not export figure {path}: no kaleido")

    monkeypatch.setattr(ReportGenerator, "_save_figure", broken)
    assert main(["chain", "--config", config_file, "--out", out, "--seeds", "0", "--jobs", "1"]) == 1
    assert "chain.svg" in capsys.readouterr().err


@pytest.mark.parametrize("error", [ValueError("token ids outside [0, 32)"),
                                   FileNotFoundError("runs/missing/encoder.json")])
def test_input_errors_below_config_exit_2(error, tmp_path, monkeypatch, capsys):
    import trusttune.cli as cli

    def failing(config):
        raise error

    monkeypatch.setitem(cli.COMMANDS, "theory", failing)
    assert main(["theory", "--out", str(tmp_path)]) == 2
    assert str(error) in capsys.readouterr().err
