import numpy as np
import pytest

from trusttune.config import build_run_config
from trusttune.model import EncoderConfig, HeadConfig, init_encoder, init_head
from trusttune.objectives import Batch
from trusttune.tasks import generate_task, suite_by_id


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow direction-only experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# hand-sized model: V=8 (only CLS and two content ids used), n=2, one block
HAND_ENCODER = EncoderConfig(vocab_size=8, dim=2, blocks=1, ffn_dim=3, max_len=4, ln_eps=0.5, init_std=0.5)

# small enough for end-to-end command runs in a few seconds
TINY_OVERRIDES = {
    "model.vocab_size": 32,
    "model.dim": 4,
    "model.blocks": 1,
    "model.ffn_dim": 8,
    "model.max_len": 6,
    "model.head_hidden": 4,
    "pretrain.steps": 3,
    "pretrain.corpus_size": 40,
    "pretrain.batch_size": 8,
    "task.n_train": 24,
    "task.n_dev": 12,
    "task.seq_len": 6,
    "optim.total_updates": 4,
    "optim.batch_size": 8,
    "probe.epochs": 2,
    "probe.batch_size": 8,
    "theory.trials": 5,
    "theory.mc_samples": 2000,
    "run.seeds": [0, 1],
}


@pytest.fixture
def hand_encoder():
    return init_encoder(HAND_ENCODER, np.random.default_rng(11))


@pytest.fixture
def hand_head():
    return init_head(HeadConfig(input_dim=2, num_classes=2, layers=2, hidden=3, init_std=0.8),
                     np.random.default_rng(12))


@pytest.fixture
def spectral_hand_head():
    return init_head(HeadConfig(input_dim=2, num_classes=2, layers=2, hidden=3, spectral=True, init_std=0.8),
                     np.random.default_rng(13))


@pytest.fixture
def hand_batch():
    return Batch(tokens=np.array([[0, 3, 4], [0, 4, 3]]), labels=np.array([1, 0]))


@pytest.fixture
def tiny_values(tmp_path):
    """Flat config values for a tiny run writing under tmp_path"""
    overrides = {**TINY_OVERRIDES, "run.out_dir": str(tmp_path / "runs")}
    return build_run_config("test", overrides).values


@pytest.fixture
def tiny_config(tiny_values):
    return build_run_config("test", {}, base=tiny_values)


@pytest.fixture(scope="session")
def small_suite():
    return suite_by_id(0, vocab_size=32, seq_len=6, n_train=40, n_dev=20)


@pytest.fixture(scope="session")
def keyword_task(small_suite):
    return generate_task(small_suite["keyword_a"])
