import pytest
import yaml

from trusttune.config import (DEFAULT_CONFIG, build_run_config, flatten, load_config, parse_seed_list)
from trusttune.errors import ConfigError


def test_defaults_validate():
    config = build_run_config("finetune", {})
    assert config.get("method.name") == "r3f"
    assert config.get("optim.bias_correction") is False
    assert config.section("theory") == DEFAULT_CONFIG["theory"]


def test_unknown_keys_are_listed():
    with pytest.raises(ConfigError, match="method.lamda.*optim.lrr|optim.lrr.*method.lamda"):
        build_run_config("finetune", {"method.lamda": 1.0, "optim.lrr": 0.1})


def test_unknown_get_key_rejected():
    with pytest.raises(ConfigError):
        build_run_config("finetune", {}).get("model.heads")


@pytest.mark.parametrize("key, value", [
    ("optim.total_updates", "many"),
    ("optim.total_updates", True),
    ("optim.bias_correction", 1),
    ("run.seeds", 3),
    ("method.name", 5),
])
def test_type_mismatches_rejected(key, value):
    with pytest.raises(ConfigError, match=key):
        build_run_config("finetune", {key: value})


def test_ints_accepted_for_float_fields():
    config = build_run_config("finetune", {"method.lambda": 2})
    assert config.get("method.lambda") == 2.0
    assert isinstance(config.get("method.lambda"), float)


@pytest.mark.parametrize("overrides", [
    {"run.seeds": []},
    {"run.jobs": 0},
    {"pretrain.mask_rate": 1.0},
    {"optim.total_updates": 0},
    {"model.pooling": "max"},
])
def test_semantic_validation(overrides):
    with pytest.raises(ConfigError):
        build_run_config("finetune", overrides)


def test_hash_ignores_override_order():
    a = build_run_config("finetune", {"method.lambda": 0.5, "optim.lr": 2e-3})
    b = build_run_config("finetune", {"optim.lr": 2e-3, "method.lambda": 0.5})
    assert a.config_hash == b.config_hash
    assert a.config_hash != build_run_config("finetune", {}).config_hash


def test_hash_ignores_execution_keys():
    base = build_run_config("finetune", {})
    moved = base.with_overrides({"run.out_dir": "elsewhere", "run.jobs": 4, "logging.level": "DEBUG"})
    assert moved.config_hash == base.config_hash
    assert base.with_overrides({"run.seeds": [7]}).config_hash != base.config_hash


def test_yaml_is_deep_merged(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"method": {"lambda": 0.1}, "task": {"presets": {"order_a": {"lr": 5e-4}}}}))
    config = load_config(str(path), "finetune", {"run.jobs": 2})
    assert config.get("method.lambda") == 0.1
    assert config.get("method.noise_dist") == "uniform"
    assert config.get("task.presets") == {"order_a": {"lr": 5e-4}}
    assert config.get("run.jobs") == 2


def test_missing_yaml_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.yaml"))


def test_non_mapping_yaml_rejected(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_with_overrides_keeps_base_values():
    config = build_run_config("finetune", {"method.lambda": 0.5}).with_overrides({"method.name": "r4f"})
    assert config.get("method.lambda") == 0.5
    assert config.get("method.name") == "r4f"


def test_flatten_keeps_presets_opaque():
    flat = flatten(DEFAULT_CONFIG)
    assert "task.presets" in flat
    assert "optim.lr" in flat


def test_parse_seed_list():
    assert parse_seed_list("0,1, 2") == [0, 1, 2]
    with pytest.raises(ConfigError):
        parse_seed_list("0,x")


@pytest.mark.parametrize("name", ["quick.yaml", "search_grid.yaml", "collapse.yaml"])
def test_shipped_configs_validate(name):
    from pathlib import Path

    config = load_config(str(Path(__file__).resolve().parent.parent / "configs" / name))
    assert config.get("run.seeds")
