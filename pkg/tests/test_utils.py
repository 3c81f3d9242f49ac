import logging
from logging.handlers import RotatingFileHandler

import numpy as np
import pytest

from trusttune.utils import RngStreams, canonical_json, read_json, setup_logger, stable_seed, write_json


def test_stable_seed_is_stable():
    assert stable_seed(0, "init") == stable_seed(0, "init")
    assert stable_seed(0, "init") != stable_seed(0, "data")
    assert stable_seed(1, "init") != stable_seed(0, "init")
    assert 0 <= stable_seed("x") < 2 ** 64


def test_streams_do_not_interfere():
    a, b = RngStreams(7), RngStreams(7)
    a.noise.normal(size=1000)
    assert a.data.integers(0, 1 << 30) == b.data.integers(0, 1 << 30)
    assert a.init.random() != a.probe.random()


def test_child_streams_are_separate_namespaces():
    root = RngStreams(3)
    assert root.child("x").init.random() == RngStreams(3).child("x").init.random()
    assert root.child("x").init.random() != root.child("y").init.random()


def test_json_files_are_sorted_with_lf(tmp_path):
    path = write_json({"b": 1, "a": [1.5, 2]}, tmp_path / "nested" / "out.json")
    raw = path.read_bytes()
    assert b"\r\n" not in raw and raw.endswith(b"\n")
    assert raw.index(b'"a"') < raw.index(b'"b"')
    assert read_json(path) == {"a": [1.5, 2], "b": 1}
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'


def test_read_json_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_json(tmp_path / "nope.json")


def test_json_floats_round_trip(tmp_path):
    values = np.random.default_rng(0).normal(size=50).tolist()
    path = write_json({"v": values}, tmp_path / "f.json")
    assert read_json(path)["v"] == values


def test_setup_logger_moves_the_log_file(tmp_path):
    logger = setup_logger(str(tmp_path / "one" / "a.log"))
    setup_logger(str(tmp_path / "two" / "b.log"), level="DEBUG")
    files = [h for h in logger.handlers if isinstance(h, RotatingFileHandler)]
    assert len(files) == 1
    assert files[0].baseFilename == str(tmp_path / "two" / "b.log")
    assert logger.level == logging.DEBUG
    logging.getLogger("trusttune.model").info("hello")
    files[0].flush()
    assert "hello" in (tmp_path / "two" / "b.log").read_text(encoding="utf-8")
