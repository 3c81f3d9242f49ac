import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import yaml

from .errors import ConfigError
from .utils import canonical_json

SOURCE_TASK = "keyword_a"

DEFAULT_CONFIG = {
    "logging": {
        "level": "INFO",
        "file": "logs/trusttune.log",
        "rotate_mb": 5
    },
    "run": {
        "out_dir": "runs",
        "seeds": [0, 1, 2],
        "jobs": 1,
        "checkpoint": "",
        "wall_time_in_csv": False
    },
    "model": {
        "vocab_size": 64,
        "dim": 16,
        "blocks": 2,
        "ffn_dim": 32,
        "max_len": 16,
        "pooling": "first_token",
        "ln_eps": 1e-5,
        "init_std": 0.1,
        "head_layers": 2,
        "head_hidden": 16,
        "spectral_train_iters": 1,
        "spectral_eval_iters": 25
    },
    "pretrain": {
        "mask_rate": 0.15,
        "steps": 800,
        "corpus_size": 4000,
        "batch_size": 32,
        "lr": 3e-3,
        "seed": 0
    },
    "task": {
        "suite_seed": 0,
        "name": SOURCE_TASK,
        "n_train": 2000,
        "n_dev": 500,
        "seq_len": 16,
        # per-task optim overrides, e.g. {"order_a": {"lr": 2e-3}}
        "presets": {}
    },
    "method": {
        "name": "r3f",
        "lambda": 1.0,
        "lambda_grid": [],
        "noise_dist": "uniform",
        "noise_grid": [],
        "sigma": 1e-5,
        "epsilon": 1e-5,
        "ascent_steps": 1,
        "ascent_lr": 1e-3,
        "projection": "l2",
        "label_smoothing": 0.0
    },
    "optim": {
        "lr": 1e-3,
        "total_updates": 2000,
        "warmup_fraction": 0.06,
        "power": 1.0,
        "end_lr": 0.0,
        "beta1": 0.9,
        "beta2": 0.98,
        "eps": 1e-6,
        "weight_decay": 0.01,
        "bias_correction": False,
        "clip_norm": 0.0,
        "batch_size": 16,
        "pp_update_factor": 2.0
    },
    "probe": {
        "lr": 1e-2,
        "epochs": 20,
        "batch_size": 32
    },
    "chain": {
        "tasks": ["majority_a", "order_a", "parity_a"],
        "methods": ["standard", "r3f"]
    },
    "cycle": {
        "tasks": ["keyword_a", "majority_a", "order_a", "parity_a"],
        "cycles": 2,
        "methods": ["standard", "r4f"]
    },
    "matrix": {
        "probe_tasks": ["majority_a", "order_a", "parity_a", "keyword_b", "majority_c3", "order_b"],
        "methods": ["standard", "r3f", "r4f"]
    },
    "stability": {
        "methods": ["standard", "standard_pp", "r3f", "r4f"]
    },
    "theory": {
        "trials": 200,
        "dim": 3,
        "mc_samples": 100000,
        "seed": 0
    }
}

# values stored as whole dicts instead of being flattened further
OPAQUE_KEYS = {"task.presets"}

# where and how a run executes; never part of the config hash
EXECUTION_KEYS = {"run.out_dir", "run.jobs", "logging.level", "logging.file", "logging.rotate_mb"}


def flatten(cfg: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in cfg.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict) and dotted not in OPAQUE_KEYS:
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _check_type(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok:
            value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


@dataclass
class RunConfig:
    """Validated flat configuration of one command invocation"""

    command: str
    values: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        hashed = {k: v for k, v in self.values.items() if k not in EXECUTION_KEYS}
        return hashlib.sha256(canonical_json(hashed).encode("utf-8")).hexdigest()[:16]

    def get(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"Unknown config key: {key}")
        return self.values[key]

    def section(self, name: str) -> Dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        return build_run_config(self.command, overrides, base=self.values)


def build_run_config(command: str, overrides: Dict[str, Any], base: Dict[str, Any] | None = None) -> RunConfig:
    """Validate dotted overrides against the defaults and return a RunConfig"""
    defaults = flatten(DEFAULT_CONFIG)
    values = dict(base) if base is not None else dict(defaults)
    unknown = sorted(k for k in overrides if k not in defaults)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    for key, value in overrides.items():
        values[key] = _check_type(key, value, defaults[key])
    _validate(values)
    return RunConfig(command=command, values=values)


def _validate(values: Dict[str, Any]) -> None:
    if not values["run.seeds"]:
        raise ConfigError("run.seeds must list at least one seed")
    if not all(isinstance(s, int) and not isinstance(s, bool) for s in values["run.seeds"]):
        raise ConfigError("run.seeds must be integers")
    if values["run.jobs"] < 1:
        raise ConfigError("run.jobs must be >= 1")
    if not 0.0 < values["pretrain.mask_rate"] < 1.0:
        raise ConfigError(f"pretrain.mask_rate must lie in (0, 1), got {values['pretrain.mask_rate']}")
    if values["optim.total_updates"] < 1:
        raise ConfigError("optim.total_updates must be >= 1")
    if not 0.0 <= values["optim.warmup_fraction"] <= 1.0:
        raise ConfigError("optim.warmup_fraction must lie in [0, 1]")
    if values["model.pooling"] not in ("first_token", "mean"):
        raise ConfigError(f"model.pooling must be first_token or mean, got {values['model.pooling']}")


def load_config(path: str | None, command: str = "run", overrides: Dict[str, Any] | None = None) -> RunConfig:
    user_cfg = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"Config file not found: {p}")
        with p.open("r", encoding="utf-8") as f:
            user_cfg = yaml.safe_load(f) or {}
        if not isinstance(user_cfg, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    flat_user = flatten(user_cfg)
    flat_user.update(overrides or {})
    return build_run_config(command, flat_user)


def resolve_optim_config(values: Dict[str, Any], method: str, task_id: str | None = None) -> Dict[str, Any]:
    """Optimizer settings for one run: task presets first, then the Standard++ overrides"""
    optim = {k[len("optim."):]: v for k, v in values.items() if k.startswith("optim.")}
    presets = values.get("task.presets", {}) or {}
    if task_id is not None and task_id in presets:
        for key, value in presets[task_id].items():
            if key not in optim:
                raise ConfigError(f"task.presets.{task_id}: unknown optim key {key}")
            optim[key] = _check_type(f"optim.{key}", value, DEFAULT_CONFIG["optim"][key])
    if method == "standard_pp":
        optim["bias_correction"] = True
        optim["total_updates"] = int(round(optim["total_updates"] * optim["pp_update_factor"]))
    return optim


def config_diff(a: Dict[str, Any], b: Dict[str, Any]) -> List[str]:
    return sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))


def parse_seed_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"--seeds expects comma separated integers, got {text!r}") from e
