import hashlib
import json
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict

import numpy as np

STREAM_NAMES = ("init", "data", "noise", "probe")


def setup_logger(log_file: str, level: str = "INFO", rotate_mb: int = 5):
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger("trusttune")
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    handler = RotatingFileHandler(log_file, maxBytes=rotate_mb*1024*1024, backupCount=3, encoding="utf-8")
    fmt = logging.Formatter("%(asctime)s | %(levelname)s | %(message)s")
    handler.setFormatter(fmt)
    for old in [h for h in logger.handlers if isinstance(h, RotatingFileHandler)]:
        logger.removeHandler(old)
        old.close()
    logger.addHandler(handler)
    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        console = logging.StreamHandler()
        console.setLevel(logging.WARNING)
        console.setFormatter(fmt)
        logger.addHandler(console)
    return logger


def stable_seed(*parts: Any) -> int:
    """64-bit seed derived from the sha256 of the joined parts"""
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class RngStreams:
    """The four named random streams of a run: init, data, noise, probe.

    Each stream is seeded from hash(master_seed, namespace, name), so consuming one
    stream never shifts another.
    """

    def __init__(self, master_seed: int, namespace: str = ""):
        self.master_seed = int(master_seed)
        self.namespace = namespace
        self._streams = {
            name: np.random.default_rng(stable_seed(self.master_seed, namespace, name))
            for name in STREAM_NAMES
        }

    @property
    def init(self) -> np.random.Generator:
        return self._streams["init"]

    @property
    def data(self) -> np.random.Generator:
        return self._streams["data"]

    @property
    def noise(self) -> np.random.Generator:
        return self._streams["noise"]

    @property
    def probe(self) -> np.random.Generator:
        return self._streams["probe"]

    def child(self, namespace: str) -> "RngStreams":
        return RngStreams(self.master_seed, f"{self.namespace}/{namespace}")


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def write_json(data: Dict[str, Any], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path


def read_json(path: Path) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"File not found: {p}")
    with open(p, "r", encoding="utf-8") as f:
        return json.load(f)
