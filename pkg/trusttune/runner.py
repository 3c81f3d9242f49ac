"""Command implementations: each cmd_* takes a RunConfig and writes its run directory.

Run directory layout::

    <out>/pretrain/             encoder.json, manifests/seed-<k>.json, summary_manifest.json
    <out>/finetune/<point>/     results.csv, checkpoints/seed-<k>.json, manifests/seed-<k>.json,
                                summary_manifest.json
    <out>/stability/            one finetune run dir per method, stability_summary.csv, stability_<task>.svg
    <out>/chain/ | cycle/ | probe_matrix/ | theory/

Independent seeds run in a multiprocessing pool when run.jobs > 1, unless
TRUSTTUNE_DETERMINISTIC=1. Results are always gathered in seed order, so the
written files do not depend on the number of workers.
"""

import logging
import os
import time
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, InvariantViolation, TrustTuneError
from .model import EncoderConfig, EncoderParams, PretrainConfig, init_encoder, masked_token_accuracy, pretrain
from .probes import (chain_frame, cyclic_retention, degradation_drop, generalization_probe_matrix, matrix_medians,
                     sequential_degradation)
from .report import ReportGenerator, seed_summary, write_csv
from .tasks import Task, generate_corpus, generate_task, suite_by_id
from .theory import gaussian_self_test, lipschitz_bound_experiment
from .training import TrainingPlan
from .utils import RngStreams, file_sha256, read_json, stable_seed, write_json

logger = logging.getLogger(__name__)

DETERMINISTIC_ENV = "TRUSTTUNE_DETERMINISTIC"
SUMMARY_MANIFEST = "summary_manifest.json"


def run_parallel(fn: Callable[[Any], Any], items: Sequence[Any], jobs: int) -> List[Any]:
    """Ordered map over items, in a process pool when allowed"""
    if jobs <= 1 or len(items) <= 1 or os.environ.get(DETERMINISTIC_ENV) == "1":
        return [fn(item) for item in items]
    with Pool(processes=min(jobs, len(items))) as pool:
        return pool.map(fn, items)


def artifact_entry(path: Path, root: Path) -> Dict[str, str]:
    return {"path": Path(path).relative_to(root).as_posix(), "sha256": file_sha256(path)}


def validate_manifest(run_dir: Path, manifest: Dict[str, Any]) -> None:
    """Every listed artifact exists and matches its recorded hash"""
    for entry in manifest.get("artifacts", []):
        path = Path(run_dir) / entry["path"]
        if not path.exists():
            raise InvariantViolation(f"{run_dir}: manifest lists missing artifact {entry['path']}")
        if file_sha256(path) != entry["sha256"]:
            raise InvariantViolation(f"{run_dir}: artifact {entry['path']} does not match its manifest hash")


def _summary_manifest(run_dir: Path, config: RunConfig, kind: str, artifacts: Sequence[Path],
                      **fields: Any) -> Dict[str, Any]:
    manifest = {"kind": kind, "command": config.command, "config_hash": config.config_hash,
                "config": config.values, "artifacts": [artifact_entry(p, run_dir) for p in artifacts],
                **fields}
    write_json(manifest, run_dir / SUMMARY_MANIFEST)
    return manifest


# ---------------------------------------------------------------------------
# shared inputs
# ---------------------------------------------------------------------------

def out_dir(config: RunConfig) -> Path:
    path = Path(config.get("run.out_dir"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def checkpoint_path(config: RunConfig) -> Path:
    explicit = config.get("run.checkpoint")
    return Path(explicit) if explicit else out_dir(config) / "pretrain" / "encoder.json"


def load_pretrained(config: RunConfig) -> EncoderParams:
    path = checkpoint_path(config)
    if not path.exists():
        raise ConfigError(f"pretrained checkpoint {path} not found; run `pretrain` first or set run.checkpoint")
    encoder = load_checkpoint(path).encoder
    model = config.section("model")
    if encoder.config.vocab_size != model["vocab_size"] or encoder.config.dim != model["dim"]:
        raise ConfigError(f"checkpoint {path} was built with V={encoder.config.vocab_size}, "
                          f"n={encoder.config.dim}; config asks for V={model['vocab_size']}, n={model['dim']}")
    return encoder


def load_tasks(config: RunConfig, task_ids: Sequence[str]) -> Dict[str, Task]:
    task = config.section("task")
    if task["seq_len"] > config.get("model.max_len"):
        raise ConfigError(f"task.seq_len {task['seq_len']} exceeds model.max_len {config.get('model.max_len')}")
    suite = suite_by_id(task["suite_seed"], vocab_size=config.get("model.vocab_size"), seq_len=task["seq_len"],
                        n_train=task["n_train"], n_dev=task["n_dev"])
    unknown = [t for t in task_ids if t not in suite]
    if unknown:
        raise ConfigError(f"unknown task ids {unknown}; suite has {sorted(suite)}")
    return {t: generate_task(suite[t]) for t in task_ids}


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(config: RunConfig) -> Dict[str, Any]:
    section = config.section("pretrain")
    seed = section["seed"]
    run_dir = out_dir(config) / "pretrain"
    model = config.section("model")
    enc_cfg = EncoderConfig.from_section(model)
    cfg = PretrainConfig.from_section(section)
    corpus = generate_corpus(enc_cfg.vocab_size, model["max_len"], cfg.corpus_size, seed)
    held_out = generate_corpus(enc_cfg.vocab_size, model["max_len"], 500, stable_seed(seed, "held-out"))

    started = time.perf_counter()
    initial = init_encoder(enc_cfg, RngStreams(seed, "pretrain").child("encoder").init)
    result = pretrain(initial, cfg, corpus, seed)
    wall = time.perf_counter() - started
    acc = masked_token_accuracy(result.params, held_out, cfg.mask_rate, seed)
    logger.info("pretraining finished: masked-token accuracy %.3f (chance %.3f)", acc, 1.0 / enc_cfg.vocab_size)

    ckpt = run_dir / "encoder.json"
    content_hash = save_checkpoint(ckpt, result.params, extra={"config_hash": config.config_hash, "seed": seed})
    seed_manifest = {
        "config_hash": config.config_hash, "seed": seed, "status": "ok", "wall_seconds": wall,
        "artifacts": [artifact_entry(ckpt, run_dir)], "checkpoint_content_hash": content_hash,
        "initial_loss": result.losses[0] if result.losses else None,
        "final_loss": result.losses[-1] if result.losses else None,
        "masked_token_accuracy": acc, "chance": 1.0 / enc_cfg.vocab_size,
    }
    write_json(seed_manifest, run_dir / "manifests" / f"seed-{seed}.json")
    loss_csv = write_csv(pd.DataFrame({"step": np.arange(1, len(result.losses) + 1), "loss": result.losses}),
                         run_dir / "loss_curve.csv")
    return _summary_manifest(run_dir, config, "pretrain", [loss_csv], seeds=[seed],
                             checkpoint=artifact_entry(ckpt, run_dir))


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------

def _finetune_seed(job: Tuple[Dict[str, Any], str, str, int, str]) -> Dict[str, Any]:
    values, task_id, method, seed, run_dir = job
    config = RunConfig("finetune", values)
    encoder = load_pretrained(config)
    task = load_tasks(config, [task_id])[task_id]
    plan = TrainingPlan(values)
    result = plan.fine_tune(encoder, task, method, seed)
    run_path = Path(run_dir)
    ckpt = run_path / "checkpoints" / f"seed-{seed}.json"
    save_checkpoint(ckpt, result.encoder, result.head, extra={"config_hash": config.config_hash, "seed": seed,
                                                              "method": method, "task": task_id})
    manifest = {
        "config_hash": config.config_hash, "seed": seed, "method": method, "task": task_id,
        "status": result.status, "failed_step": result.failed_step, "updates": result.updates,
        "best_epoch": result.best_epoch, "best_dev_accuracy": result.best_dev_accuracy,
        "wall_seconds": result.wall_seconds, "seconds_to_best": result.seconds_to_best,
        "cost": result.cost.as_dict(), "artifacts": [artifact_entry(ckpt, run_path)],
    }
    write_json(manifest, run_path / "manifests" / f"seed-{seed}.json")
    history = [{"epoch": r.epoch, "dev_accuracy": r.dev_accuracy, "best_dev_accuracy": r.best_dev_accuracy,
                "fp_total": r.fp_total, "bp_total": r.bp_total, "xfp_total": r.xfp_total} for r in result.history]
    return {"method": method, "task": task_id, "seed": seed, "status": result.status, "history": history,
            "best_dev_accuracy": result.best_dev_accuracy, "wall_seconds": result.wall_seconds,
            "seconds_to_best": result.seconds_to_best}


def grid_points(config: RunConfig, method: str) -> List[Tuple[str, Dict[str, Any]]]:
    """(name, overrides) per lambda / noise grid point; a single point when no grid is set"""
    lambdas = config.get("method.lambda_grid") or [config.get("method.lambda")]
    noises = config.get("method.noise_grid") or [config.get("method.noise_dist")]
    if method not in ("r3f", "r4f", "smart"):
        lambdas = [config.get("method.lambda")]
    if method not in ("r3f", "r4f"):
        noises = [config.get("method.noise_dist")]
    points = []
    for lam in lambdas:
        for noise in noises:
            overrides = {"method.name": method, "method.lambda": float(lam), "method.noise_dist": noise,
                         "method.lambda_grid": [], "method.noise_grid": []}
            name = method
            if len(lambdas) > 1:
                name += f"-lam{lam:g}"
            if len(noises) > 1:
                name += f"-{noise}"
            points.append((name, overrides))
    return points


def run_finetune_point(config: RunConfig, method: str, task_id: str, run_dir: Path,
                       point: str | None = None) -> Dict[str, Any]:
    seeds = config.get("run.seeds")
    run_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(config.values, task_id, method, seed, str(run_dir)) for seed in seeds]
    runs = run_parallel(_finetune_seed, jobs, config.get("run.jobs"))
    failed = [r["seed"] for r in runs if r["status"] != "ok"]
    if failed:
        logger.warning("%s on %s: seeds %s failed", method, task_id, failed)
    reporter = ReportGenerator()
    table = reporter.finetune_table(config.config_hash, runs, config.get("run.wall_time_in_csv"))
    csv_path = write_csv(table, run_dir / "results.csv")
    manifest = _summary_manifest(run_dir, config, "finetune", [csv_path], method=method, point=point or method,
                                 task=task_id, seeds=list(seeds), grid_size=len(grid_points(config, method)),
                                 runs=[{k: r[k] for k in ("seed", "status", "best_dev_accuracy", "wall_seconds",
                                                          "seconds_to_best")} for r in runs],
                                 **seed_summary(runs))
    if len(failed) == len(runs):
        raise TrustTuneError(f"{method} on {task_id}: every seed failed")
    return manifest


def cmd_finetune(config: RunConfig) -> List[Dict[str, Any]]:
    method = config.get("method.name")
    task_id = config.get("task.name")
    load_pretrained(config)
    manifests = []
    for name, overrides in grid_points(config, method):
        point = config.with_overrides(overrides)
        run_dir = out_dir(config) / "finetune" / f"{name}-{task_id}"
        logger.info("fine-tuning %s on %s (%s)", name, task_id, point.config_hash)
        manifests.append(run_finetune_point(point, method, task_id, run_dir, point=name))
    return manifests


def cmd_stability(config: RunConfig) -> pd.DataFrame:
    seeds = config.get("run.seeds")
    if len(seeds) < 2:
        raise ConfigError("stability needs at least 2 seeds")
    task_id = config.get("task.name")
    load_pretrained(config)
    root = out_dir(config) / "stability"
    rows = []
    for method in config.get("stability.methods"):
        point = config.with_overrides({"method.name": method})
        manifest = run_finetune_point(point, method, task_id, root / f"{method}-{task_id}")
        for run in manifest["runs"]:
            if run["status"] == "ok":
                rows.append({"method": method, "task": task_id, "seed": run["seed"],
                             "best_dev_accuracy": run["best_dev_accuracy"]})
    best = pd.DataFrame(rows, columns=["method", "task", "seed", "best_dev_accuracy"])
    reporter = ReportGenerator()
    summary = reporter.stability_summary(best)
    artifacts = [write_csv(summary, root / "stability_summary.csv")]
    artifacts.append(reporter.stability_figure(best, task_id, root / f"stability_{task_id}.svg"))
    _summary_manifest(root, config, "stability", artifacts, task=task_id, seeds=list(seeds))
    return summary


# ---------------------------------------------------------------------------
# collapse probing
# ---------------------------------------------------------------------------

def _check_checkpoint_unchanged(config: RunConfig, digest: str) -> None:
    if file_sha256(checkpoint_path(config)) != digest:
        raise InvariantViolation(f"pretrained checkpoint {checkpoint_path(config)} changed during the experiment")


def _chain_job(job: Tuple[Dict[str, Any], str, int]) -> pd.DataFrame:
    values, method, seed = job
    config = RunConfig("chain", values)
    source = config.get("task.name")
    chain_ids = config.get("chain.tasks")
    tasks = load_tasks(config, [source, *chain_ids])
    results = sequential_degradation(load_pretrained(config), tasks[source], [tasks[t] for t in chain_ids],
                                     method, [seed], TrainingPlan(values))
    return chain_frame(results)


def _cycle_job(job: Tuple[Dict[str, Any], str, int]) -> pd.DataFrame:
    values, method, seed = job
    config = RunConfig("cycle", values)
    cycle_ids = config.get("cycle.tasks")
    tasks = load_tasks(config, cycle_ids)
    results = cyclic_retention(load_pretrained(config), [tasks[t] for t in cycle_ids], config.get("cycle.cycles"),
                               method, [seed], TrainingPlan(values))
    return chain_frame(results)


def _matrix_job(job: Tuple[Dict[str, Any], int]) -> pd.DataFrame:
    values, seed = job
    config = RunConfig("probe-matrix", values)
    source = config.get("task.name")
    probe_ids = config.get("matrix.probe_tasks")
    tasks = load_tasks(config, [source, *probe_ids])
    matrix = generalization_probe_matrix(load_pretrained(config), tasks[source], [tasks[t] for t in probe_ids],
                                         config.get("matrix.methods"), [seed], TrainingPlan(values))
    # "none" rows probe the pretrained encoder: no fine-tuning stage
    return matrix.assign(stage_index=0, cycle=None,
                         stage_task=np.where(matrix["method"] == "none", "", source))


def _probe_experiment(config: RunConfig, name: str, jobs: List[Any],
                      job_fn: Callable[[Any], pd.DataFrame]) -> Tuple[pd.DataFrame, Path, List[Path]]:
    """Runs the jobs, checks the pretrained checkpoint is untouched, writes <name>.csv"""
    load_pretrained(config)
    digest = file_sha256(checkpoint_path(config))
    frame = pd.concat(run_parallel(job_fn, jobs, config.get("run.jobs")), ignore_index=True)
    _check_checkpoint_unchanged(config, digest)
    failed = frame[frame["status"] != "ok"]
    if not failed.empty:
        logger.warning("%s: %d rows come from failed fine-tunes", name, len(failed))
    stem = name.replace("-", "_")
    root = out_dir(config) / stem
    table = ReportGenerator().probe_table(config.config_hash, frame)
    return frame, root, [write_csv(table, root / f"{stem}.csv")]


def cmd_chain(config: RunConfig) -> pd.DataFrame:
    source = config.get("task.name")
    if source in config.get("chain.tasks"):
        raise ConfigError("chain.tasks must not contain the source task")
    seeds = config.get("run.seeds")
    jobs = [(config.values, method, seed) for method in config.get("chain.methods") for seed in seeds]
    frame, root, artifacts = _probe_experiment(config, "chain", jobs, _chain_job)
    artifacts.append(ReportGenerator().chain_figure(frame, root / "chain.svg"))
    for method in config.get("chain.methods"):
        logger.info("chain %s: median source-probe drop %.4f", method, degradation_drop(frame, method))
    _summary_manifest(root, config, "chain", artifacts, source=source, seeds=list(seeds))
    return frame


def cmd_cycle(config: RunConfig) -> pd.DataFrame:
    if config.get("cycle.cycles") < 2:
        raise ConfigError("cycle.cycles must be >= 2")
    seeds = config.get("run.seeds")
    jobs = [(config.values, method, seed) for method in config.get("cycle.methods") for seed in seeds]
    frame, root, artifacts = _probe_experiment(config, "cycle", jobs, _cycle_job)
    artifacts.append(ReportGenerator().cycle_figure(frame, root / "cycle.svg"))
    _summary_manifest(root, config, "cycle", artifacts, seeds=list(seeds))
    return frame


def cmd_probe_matrix(config: RunConfig) -> pd.DataFrame:
    source = config.get("task.name")
    if source in config.get("matrix.probe_tasks"):
        raise ConfigError("matrix.probe_tasks must not contain the source task")
    seeds = config.get("run.seeds")
    frame, root, artifacts = _probe_experiment(config, "probe-matrix", [(config.values, s) for s in seeds],
                                               _matrix_job)
    medians = matrix_medians(frame)
    artifacts.append(write_csv(medians.reset_index(), root / "probe_matrix_medians.csv"))
    artifacts.append(ReportGenerator().matrix_figure(medians, root / "probe_matrix.svg"))
    _summary_manifest(root, config, "probe-matrix", artifacts, source=source, seeds=list(seeds))
    return frame


# ---------------------------------------------------------------------------
# theory and report
# ---------------------------------------------------------------------------

def cmd_theory(config: RunConfig) -> pd.DataFrame:
    section = config.section("theory")
    if section["trials"] < 1:
        raise ConfigError(f"theory.trials must be >= 1, got {section['trials']}")
    rng = np.random.default_rng(stable_seed(section["seed"], "theory"))
    trials = lipschitz_bound_experiment(section["dim"], section["trials"], rng)
    checks = gaussian_self_test(min(section["dim"], 3), section["mc_samples"], rng)
    root = out_dir(config) / "theory"
    artifacts = [write_csv(trials, root / "theory.csv"), write_csv(checks, root / "self_test.csv")]
    failing = trials[~trials["passed"].astype(bool)]
    hand_failures = checks[(checks["check"] != "monte_carlo") & ~checks["passed"].astype(bool)]
    if not checks[checks["check"] == "monte_carlo"]["passed"].all():
        logger.warning("Monte-Carlo KL estimate is more than 3 standard errors from the closed form")
    if not failing.empty:
        artifacts.append(write_csv(failing, root / "failures.csv"))
    _summary_manifest(root, config, "theory", artifacts, trials=section["trials"],
                      failed_trials=int(len(failing)))
    if not failing.empty or not hand_failures.empty:
        logger.error("theory checks failed: %d trials, %d hand cases", len(failing), len(hand_failures))
        raise InvariantViolation(f"{len(failing)} theory trials and {len(hand_failures)} closed-form checks failed; "
                                 f"see {root / 'failures.csv'}")
    return trials


def _finetune_cells(run_dir: Path) -> Tuple[Dict[str, Any], pd.DataFrame]:
    manifest = read_json(run_dir / SUMMARY_MANIFEST)
    if manifest.get("kind") != "finetune":
        raise ConfigError(f"{run_dir} is not a finetune run directory")
    validate_manifest(run_dir, manifest)
    rows = [{"method": manifest["point"], "task": manifest["task"], "seed": run["seed"],
             "best_dev_accuracy": run["best_dev_accuracy"], "seconds_to_best": run["seconds_to_best"],
             "config_hash": manifest["config_hash"]}
            for run in manifest["runs"] if run["status"] == "ok"]
    return manifest, pd.DataFrame(rows)


def collect_run_dirs(paths: Sequence[Path]) -> List[Path]:
    """Finetune run dirs under the given paths (a path may itself be one)"""
    found = set()
    for path in paths:
        path = Path(path)
        if (path / SUMMARY_MANIFEST).exists() and read_json(path / SUMMARY_MANIFEST).get("kind") == "finetune":
            found.add(path.resolve())
            continue
        for manifest in path.rglob(SUMMARY_MANIFEST):
            if read_json(manifest).get("kind") == "finetune":
                found.add(manifest.parent.resolve())
    return sorted(found)


def cmd_report(config: RunConfig, run_dirs: Sequence[Path]) -> pd.DataFrame:
    dirs = collect_run_dirs(run_dirs)
    if not dirs:
        raise ConfigError("report needs at least one completed finetune run directory")
    cells: Dict[Tuple[str, str], str] = {}
    frames = []
    for run_dir in dirs:
        manifest, frame = _finetune_cells(run_dir)
        # one cell per grid point, so a lambda grid reports one row per lambda
        key = (manifest["point"], manifest["task"])
        if key in cells and cells[key] != manifest["config_hash"]:
            raise ConfigError(f"conflicting config hashes for {key}: {cells[key]} vs {manifest['config_hash']}")
        if key in cells:
            continue
        cells[key] = manifest["config_hash"]
        frames.append(frame)
    combined = pd.concat(frames, ignore_index=True)
    reporter = ReportGenerator()
    table = reporter.comparison_table(combined)
    root = out_dir(config) / "report"
    artifacts = [write_csv(table, root / "report.csv"),
                 reporter.comparison_figure(combined, root / "report.svg")]
    _summary_manifest(root, config, "report", artifacts, sources=[str(d) for d in dirs])
    return table
