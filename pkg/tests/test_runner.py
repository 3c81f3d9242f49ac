import shutil
from pathlib import Path

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import pytest

import trusttune.runner as runner
from trusttune.checkpoint import load_checkpoint
from trusttune.config import load_config
from trusttune.errors import ConfigError, InvariantViolation, ReportError
from trusttune.probes import degradation_drop, matrix_medians, retention_gap
from trusttune.report import FINETUNE_COLUMNS, PROBE_COLUMNS, THEORY_COLUMNS, ReportGenerator
from trusttune.runner import (SUMMARY_MANIFEST, cmd_chain, cmd_cycle, cmd_finetune, cmd_pretrain, cmd_probe_matrix,
                              cmd_report, cmd_stability, cmd_theory, grid_points, run_parallel, validate_manifest)
from trusttune.utils import read_json


@pytest.fixture(autouse=True)
def no_figure_export(monkeypatch):
    def placeholder(self, figure, path):
        Path(path).write_text("<svg/>", encoding="utf-8")
        return Path(path)

    monkeypatch.setattr(ReportGenerator, "_save_figure", placeholder)


@pytest.fixture
def pretrained(tiny_config):
    cmd_pretrain(tiny_config)
    return tiny_config


def _out(config):
    return Path(config.get("run.out_dir"))


def _square(x):
    return x * x


def _read_results(path):
    return pd.read_csv(path, dtype={"seed": str})


def test_pretrain_writes_valid_manifest(pretrained):
    run_dir = _out(pretrained) / "pretrain"
    manifest = read_json(run_dir / SUMMARY_MANIFEST)
    assert manifest["kind"] == "pretrain"
    assert manifest["config_hash"] == pretrained.config_hash
    validate_manifest(run_dir, manifest)
    validate_manifest(run_dir, read_json(run_dir / "manifests" / "seed-0.json"))
    encoder = load_checkpoint(run_dir / "encoder.json").encoder
    assert encoder.config.vocab_size == 32


def test_pretrain_is_deterministic_across_output_dirs(tiny_config, tmp_path):
    cmd_pretrain(tiny_config)
    other = tiny_config.with_overrides({"run.out_dir": str(tmp_path / "other")})
    cmd_pretrain(other)
    first = (_out(tiny_config) / "pretrain" / "encoder.json").read_bytes()
    assert first == (tmp_path / "other" / "pretrain" / "encoder.json").read_bytes()


def test_manifest_validation_catches_edits(pretrained):
    run_dir = _out(pretrained) / "pretrain"
    manifest = read_json(run_dir / SUMMARY_MANIFEST)
    (run_dir / "loss_curve.csv").write_text("step,loss\n")
    with pytest.raises(InvariantViolation):
        validate_manifest(run_dir, manifest)
    (run_dir / "loss_curve.csv").unlink()
    with pytest.raises(InvariantViolation, match="missing"):
        validate_manifest(run_dir, manifest)


def test_finetune_writes_results_table(pretrained):
    [manifest] = cmd_finetune(pretrained)
    run_dir = _out(pretrained) / "finetune" / "r3f-keyword_a"
    validate_manifest(run_dir, manifest)
    assert manifest["seeds_ok"] == 2 and manifest["seeds_failed"] == 0
    table = _read_results(run_dir / "results.csv")
    assert list(table.columns) == FINETUNE_COLUMNS
    assert table["seed"].tolist()[-2:] == ["max", "median"]
    assert set(table["seed"][:-2]) == {"0", "1"}
    assert table["wall_seconds"].isna().all()
    assert (table["config_hash"] == pretrained.config_hash).all()
    for seed in (0, 1):
        seed_manifest = read_json(run_dir / "manifests" / f"seed-{seed}.json")
        validate_manifest(run_dir, seed_manifest)
        assert seed_manifest["cost"]["fp_total"] == 2 * seed_manifest["updates"]


def test_finetune_csv_is_byte_identical_on_rerun(pretrained, tmp_path, monkeypatch):
    monkeypatch.delenv(runner.DETERMINISTIC_ENV, raising=False)
    cmd_finetune(pretrained)
    first = (_out(pretrained) / "finetune" / "r3f-keyword_a" / "results.csv").read_bytes()
    cmd_finetune(pretrained)
    assert (_out(pretrained) / "finetune" / "r3f-keyword_a" / "results.csv").read_bytes() == first

    shutil.copytree(_out(pretrained) / "pretrain", tmp_path / "parallel" / "pretrain")
    parallel = pretrained.with_overrides({"run.out_dir": str(tmp_path / "parallel"), "run.jobs": 2})
    assert parallel.config_hash == pretrained.config_hash
    cmd_finetune(parallel)
    assert (tmp_path / "parallel" / "finetune" / "r3f-keyword_a" / "results.csv").read_bytes() == first


def test_wall_time_column_when_enabled(pretrained):
    cmd_finetune(pretrained.with_overrides({"run.wall_time_in_csv": True, "method.name": "standard"}))
    table = _read_results(_out(pretrained) / "finetune" / "standard-keyword_a" / "results.csv")
    assert (table["wall_seconds"] >= 0).all()


def test_lambda_grid_gets_one_run_dir_per_point(pretrained):
    config = pretrained.with_overrides({"method.lambda_grid": [0.1, 1.0]})
    assert [name for name, _ in grid_points(config, "r3f")] == ["r3f-lam0.1", "r3f-lam1"]
    assert [name for name, _ in grid_points(config, "freelb")] == ["freelb"]
    manifests = cmd_finetune(config)
    assert len(manifests) == 2
    assert manifests[0]["config_hash"] != manifests[1]["config_hash"]
    assert (_out(config) / "finetune" / "r3f-lam0.1-keyword_a" / "results.csv").exists()


def test_finetune_needs_a_checkpoint(tiny_config):
    with pytest.raises(ConfigError, match="pretrain"):
        cmd_finetune(tiny_config)


def test_checkpoint_dimension_mismatch(pretrained):
    with pytest.raises(ConfigError, match="V=32"):
        cmd_finetune(pretrained.with_overrides({"model.vocab_size": 48}))


def test_unknown_task_id(pretrained):
    with pytest.raises(ConfigError, match="unknown task"):
        cmd_finetune(pretrained.with_overrides({"task.name": "nope"}))


def test_stability_summary(pretrained):
    config = pretrained.with_overrides({"stability.methods": ["standard", "standard_pp"]})
    summary = cmd_stability(config)
    assert summary["method"].tolist() == ["standard", "standard_pp"]
    assert (summary["seeds"] == 2).all()
    assert (summary["min"] <= summary["median"]).all() and (summary["median"] <= summary["max"]).all()
    root = _out(config) / "stability"
    validate_manifest(root, read_json(root / SUMMARY_MANIFEST))


def test_stability_needs_two_seeds(pretrained):
    with pytest.raises(ConfigError, match="2 seeds"):
        cmd_stability(pretrained.with_overrides({"run.seeds": [0]}))


def test_chain_rows(pretrained):
    config = pretrained.with_overrides({"chain.tasks": ["majority_a"], "chain.methods": ["standard"]})
    frame = cmd_chain(config)
    assert len(frame) == 2 * 2
    table = pd.read_csv(_out(config) / "chain" / "chain.csv")
    assert list(table.columns) == PROBE_COLUMNS
    assert (table["probe_task"] == "keyword_a").all()
    assert table["stage_index"].tolist() == [0, 1, 0, 1]


def test_chain_rejects_source_task(pretrained):
    with pytest.raises(ConfigError):
        cmd_chain(pretrained.with_overrides({"chain.tasks": ["keyword_a"]}))


def test_cycle_rows(pretrained):
    config = pretrained.with_overrides({"cycle.tasks": ["keyword_a", "majority_a"], "cycle.methods": ["standard"],
                                        "run.seeds": [0]})
    cmd_cycle(config)
    table = pd.read_csv(_out(config) / "cycle" / "cycle.csv")
    assert len(table) == 4
    assert table["cycle"].tolist() == [1, 1, 2, 2]


def test_cycle_needs_two_rounds(pretrained):
    with pytest.raises(ConfigError):
        cmd_cycle(pretrained.with_overrides({"cycle.cycles": 1}))


def test_probe_matrix_rows(pretrained):
    config = pretrained.with_overrides({"matrix.probe_tasks": ["majority_a"], "matrix.methods": ["standard"]})
    frame = cmd_probe_matrix(config)
    assert len(frame) == 2 * 2
    root = _out(config) / "probe_matrix"
    table = pd.read_csv(root / "probe_matrix.csv")
    assert list(table.columns) == PROBE_COLUMNS
    assert set(table["method"]) == {"none", "standard"}
    medians = pd.read_csv(root / "probe_matrix_medians.csv")
    assert set(medians["method"]) == {"none", "standard"}
    validate_manifest(root, read_json(root / SUMMARY_MANIFEST))


def test_probe_experiment_detects_checkpoint_change(pretrained, monkeypatch):
    config = pretrained.with_overrides({"matrix.probe_tasks": ["majority_a"], "matrix.methods": ["standard"],
                                        "run.seeds": [0]})
    real = runner._matrix_job

    def tampering(job):
        frame = real(job)
        path = runner.checkpoint_path(config)
        path.write_text(path.read_text() + "\n")
        return frame

    monkeypatch.setattr(runner, "_matrix_job", tampering)
    with pytest.raises(InvariantViolation, match="changed"):
        cmd_probe_matrix(config)


def test_theory_outputs(tiny_config):
    trials = cmd_theory(tiny_config)
    root = _out(tiny_config) / "theory"
    table = pd.read_csv(root / "theory.csv")
    assert list(table.columns) == THEORY_COLUMNS
    assert len(table) == len(trials) == 5
    assert not (root / "failures.csv").exists()
    assert read_json(root / SUMMARY_MANIFEST)["failed_trials"] == 0


def test_theory_rejects_zero_trials(tiny_config):
    with pytest.raises(ConfigError):
        cmd_theory(tiny_config.with_overrides({"theory.trials": 0}))


def test_report_single_cell(pretrained):
    cmd_finetune(pretrained)
    table = cmd_report(pretrained, [_out(pretrained) / "finetune"])
    assert table["method"].tolist() == ["r3f"]
    assert list(table.columns) == ["method", "max:keyword_a", "median:keyword_a", "seconds_to_best:keyword_a"]
    assert (_out(pretrained) / "report" / "report.csv").exists()


def test_report_joins_methods(pretrained):
    cmd_finetune(pretrained)
    cmd_finetune(pretrained.with_overrides({"method.name": "standard"}))
    table = cmd_report(pretrained, [_out(pretrained)])
    assert table["method"].tolist() == ["r3f", "standard"]
    assert (table["max:keyword_a"] >= table["median:keyword_a"]).all()


def test_report_keeps_grid_points_apart(pretrained):
    config = pretrained.with_overrides({"method.lambda_grid": [0.1, 1.0]})
    manifests = cmd_finetune(config)
    assert [m["point"] for m in manifests] == ["r3f-lam0.1", "r3f-lam1"]
    table = cmd_report(config, [_out(config) / "finetune"])
    assert table["method"].tolist() == ["r3f-lam0.1", "r3f-lam1"]


def test_report_rejects_conflicting_hashes(pretrained, tmp_path):
    cmd_finetune(pretrained)
    other = pretrained.with_overrides({"run.out_dir": str(tmp_path / "other"), "optim.lr": 2e-3,
                                       "run.checkpoint": str(_out(pretrained) / "pretrain" / "encoder.json")})
    cmd_finetune(other)
    with pytest.raises(ConfigError, match="conflicting"):
        cmd_report(pretrained, [_out(pretrained) / "finetune", tmp_path / "other" / "finetune"])


def test_report_without_runs(tiny_config, tmp_path):
    with pytest.raises(ConfigError):
        cmd_report(tiny_config, [tmp_path])


def test_run_parallel_keeps_order(monkeypatch):
    monkeypatch.delenv(runner.DETERMINISTIC_ENV, raising=False)
    assert run_parallel(_square, list(range(6)), 3) == [0, 1, 4, 9, 16, 25]


def test_deterministic_env_skips_the_pool(monkeypatch):
    monkeypatch.setenv(runner.DETERMINISTIC_ENV, "1")

    def no_pool(*args, **kwargs):
        raise AssertionError("pool used")

    monkeypatch.setattr(runner, "Pool", no_pool)
    assert run_parallel(_square, [1, 2, 3], 4) == [1, 4, 9]


def test_figures_export_svg(tmp_path, monkeypatch):
    monkeypatch.undo()
    written = []

    def fake_write_image(self, path, format=None):
        written.append((path, format, len(self.data)))
        Path(path).write_text("<svg/>")

    monkeypatch.setattr(go.Figure, "write_image", fake_write_image)
    frame = pd.DataFrame({"method": ["standard", "standard", "r3f", "r3f"], "stage_index": [0, 1, 0, 1],
                          "accuracy": [0.9, 0.7, 0.9, 0.8]})
    path = ReportGenerator().chain_figure(frame, tmp_path / "figs" / "chain.svg")
    assert path == tmp_path / "figs" / "chain.svg"
    assert written == [(str(path), "svg", 2)]


def test_failed_figure_export_raises(tmp_path, monkeypatch, caplog):
    monkeypatch.undo()

    def broken(self, path, format=None):
        raise RuntimeError("no kaleido")

    monkeypatch.setattr(go.Figure, "write_image", broken)
    medians = pd.DataFrame(np.array([[0.5, 0.6]]), index=["none"], columns=["majority_a", "order_a"])
    with pytest.raises(ReportError, match="no kaleido"):
        ReportGenerator().matrix_figure(medians, tmp_path / "m.svg")
    assert "m.svg" in caplog.text


# ten-seed collapse directions (configs/collapse.yaml)

COLLAPSE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "collapse.yaml"


@pytest.fixture(scope="module")
def collapse_config(tmp_path_factory):
    config = load_config(str(COLLAPSE_CONFIG), "collapse",
                         {"run.out_dir": str(tmp_path_factory.mktemp("collapse"))})
    cmd_pretrain(config)
    return config


@pytest.mark.slow
def test_r3f_source_drop_along_chain_is_no_larger(collapse_config):
    frame = cmd_chain(collapse_config)
    assert frame["seed"].nunique() == 10
    assert degradation_drop(frame, "r3f") <= degradation_drop(frame, "standard")


@pytest.mark.slow
def test_r4f_retains_more_at_second_cycle(collapse_config):
    frame = cmd_cycle(collapse_config)
    assert retention_gap(frame, "r4f", "standard") >= 0.0


@pytest.mark.slow
def test_trust_region_matrix_medians_match_or_beat_standard(collapse_config):
    medians = matrix_medians(cmd_probe_matrix(collapse_config))
    assert medians.shape[1] == 6
    best = medians.loc[["r3f", "r4f"]].max(axis=0)
    assert int((best >= medians.loc["standard"]).sum()) >= 4
