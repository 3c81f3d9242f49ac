"""Parameter checkpoints as a versioned JSON container.

Layout (UTF-8, keys sorted, LF line endings)::

    {
      "format": "trusttune-checkpoint",
      "version": 1,
      "config": {"encoder": {...EncoderConfig...}, "head": {...HeadConfig...} | null, "extra": {...}},
      "arrays": {"<name>": {"shape": [d0, d1, ...], "values": [row-major fp64 ...]}, ...},
      "content_hash": "<sha256 of the canonical JSON of config + arrays>"
    }

Encoder arrays are named ``embedding_table`` and ``blocks.<i>.<field>``; head arrays
``head.<i>.weight`` / ``head.<i>.bias`` plus ``head.<i>.spectral_u`` / ``spectral_v``
when a power-iteration state exists. JSON floats round-trip fp64 exactly.
"""

import hashlib
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import DataFormatError
from .model import BLOCK_FIELDS, BlockParams, EncoderConfig, EncoderParams, HeadConfig, HeadParams
from .utils import canonical_json, read_json, write_json

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "trusttune-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    encoder: EncoderParams
    head: Optional[HeadParams] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    content_hash: str = ""


def _pack(values: np.ndarray) -> Dict[str, Any]:
    return {"shape": list(values.shape), "values": [float(x) for x in np.asarray(values).reshape(-1)]}


def _unpack(name: str, entry: Dict[str, Any]) -> np.ndarray:
    try:
        shape = tuple(int(d) for d in entry["shape"])
        values = np.array(entry["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"array {name}: malformed entry ({e})") from e
    if values.size != int(np.prod(shape)):
        raise DataFormatError(f"array {name}: {values.size} values for shape {shape}")
    return values.reshape(shape)


def _content_hash(config: Dict[str, Any], arrays: Dict[str, Any]) -> str:
    payload = canonical_json({"config": config, "arrays": arrays})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def checkpoint_payload(encoder: EncoderParams, head: HeadParams | None = None,
                       extra: Dict[str, Any] | None = None) -> Dict[str, Any]:
    arrays = {name: _pack(t.values) for name, t in encoder.named_tensors().items()}
    head_config = None
    if head is not None:
        head_config = {f.name: getattr(head.config, f.name) for f in fields(head.config)}
        arrays.update({name: _pack(t.values) for name, t in head.named_tensors().items()})
        for i, state in enumerate(head.spectral_state):
            if state is not None:
                arrays[f"head.{i}.spectral_u"] = _pack(state[0])
                arrays[f"head.{i}.spectral_v"] = _pack(state[1])
    config = {"encoder": encoder.config.as_dict(), "head": head_config, "extra": extra or {}}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "arrays": arrays,
        "content_hash": _content_hash(config, arrays),
    }


def save_checkpoint(path: Path, encoder: EncoderParams, head: HeadParams | None = None,
                    extra: Dict[str, Any] | None = None) -> str:
    """Writes the checkpoint and returns its content hash"""
    payload = checkpoint_payload(encoder, head, extra)
    write_json(payload, Path(path))
    logger.info("Saved checkpoint %s (%s)", path, payload["content_hash"][:12])
    return payload["content_hash"]


def _tensor(arrays: Dict[str, Any], name: str) -> Tensor:
    if name not in arrays:
        raise DataFormatError(f"checkpoint is missing array {name}")
    return Tensor(_unpack(name, arrays[name]), requires_grad=True, name=name)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        payload = read_json(Path(path))
    except ValueError as e:
        raise DataFormatError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path}: not a trusttune checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config, arrays = payload["config"], payload["arrays"]
    expected = _content_hash(config, arrays)
    if payload.get("content_hash") != expected:
        raise DataFormatError(f"{path}: content hash mismatch")

    enc_cfg = EncoderConfig(**config["encoder"])
    blocks = [BlockParams(**{n: _tensor(arrays, f"blocks.{i}.{n}") for n in BLOCK_FIELDS})
              for i in range(enc_cfg.blocks)]
    encoder = EncoderParams(enc_cfg, _tensor(arrays, "embedding_table"), blocks)

    head = None
    if config.get("head") is not None:
        head_cfg = HeadConfig(**config["head"])
        weights = [_tensor(arrays, f"head.{i}.weight") for i in range(head_cfg.layers)]
        biases = [_tensor(arrays, f"head.{i}.bias") for i in range(head_cfg.layers)]
        state: list[Optional[Tuple[np.ndarray, np.ndarray]]] = []
        for i in range(head_cfg.layers):
            if f"head.{i}.spectral_u" in arrays:
                state.append((_unpack("u", arrays[f"head.{i}.spectral_u"]),
                              _unpack("v", arrays[f"head.{i}.spectral_v"])))
            else:
                state.append(None)
        head = HeadParams(head_cfg, weights, biases, state)
    return Checkpoint(encoder, head, config.get("extra", {}), expected)
