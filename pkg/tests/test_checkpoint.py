import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from trusttune.autodiff import ComputeGraph
from trusttune.checkpoint import load_checkpoint, save_checkpoint
from trusttune.errors import DataFormatError
from trusttune.model import EncoderConfig, HeadConfig, init_encoder, init_head


@pytest.fixture
def encoder():
    return init_encoder(EncoderConfig(vocab_size=16, dim=4, blocks=2, ffn_dim=6, max_len=6, pooling="mean"),
                        np.random.default_rng(0))


def test_round_trip_is_exact(encoder, tmp_path):
    head = init_head(HeadConfig(input_dim=4, num_classes=3, hidden=5), np.random.default_rng(1))
    digest = save_checkpoint(tmp_path / "ck.json", encoder, head, extra={"task": "keyword_a"})
    loaded = load_checkpoint(tmp_path / "ck.json")
    assert loaded.content_hash == digest
    assert loaded.encoder.config == encoder.config
    assert loaded.encoder.fingerprint() == encoder.fingerprint()
    assert loaded.head.config == head.config
    for a, b in zip(loaded.head.weights, head.weights):
        assert_array_equal(a.values, b.values)
    assert loaded.extra == {"task": "keyword_a"}


def test_encoder_only_checkpoint(encoder, tmp_path):
    save_checkpoint(tmp_path / "enc.json", encoder)
    loaded = load_checkpoint(tmp_path / "enc.json")
    assert loaded.head is None
    assert loaded.encoder.pooling == "mean"


def test_saving_twice_gives_identical_bytes(encoder, tmp_path):
    save_checkpoint(tmp_path / "a.json", encoder)
    save_checkpoint(tmp_path / "b.json", encoder)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_spectral_state_is_restored(encoder, tmp_path):
    head = init_head(HeadConfig(input_dim=4, num_classes=2, hidden=3, spectral=True), np.random.default_rng(2))
    head.effective_weights(ComputeGraph(), mode="train")
    save_checkpoint(tmp_path / "r4f.json", encoder, head)
    loaded = load_checkpoint(tmp_path / "r4f.json").head
    assert loaded.spectral_enabled
    for (u0, v0), (u1, v1) in zip(head.spectral_state, loaded.spectral_state):
        assert_array_equal(u0, u1)
        assert_array_equal(v0, v1)


def test_tampered_values_fail_hash_check(encoder, tmp_path):
    path = tmp_path / "ck.json"
    save_checkpoint(path, encoder)
    payload = json.loads(path.read_text())
    payload["arrays"]["embedding_table"]["values"][0] += 1.0
    path.write_text(json.dumps(payload))
    with pytest.raises(DataFormatError, match="hash"):
        load_checkpoint(path)


@pytest.mark.parametrize("field, value, message", [
    ("format", "other", "not a trusttune checkpoint"),
    ("version", 99, "version"),
])
def test_foreign_files_rejected(encoder, tmp_path, field, value, message):
    path = tmp_path / "ck.json"
    save_checkpoint(path, encoder)
    payload = json.loads(path.read_text())
    payload[field] = value
    path.write_text(json.dumps(payload))
    with pytest.raises(DataFormatError, match=message):
        load_checkpoint(path)


def test_invalid_json_rejected(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(DataFormatError):
        load_checkpoint(path)
