"""
Checkpoint container.

    b"MCDN" | uint32 LE version | uint64 LE index length | JSON index | payloads

The JSON index holds `tensors` (name, dtype, shape, offset, length; offsets
relative to the first payload byte) and `meta` (model config, epoch,
best validation mIoU). Payloads are raw little-endian arrays in index order.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError, CheckpointTruncatedError
from .model import McdNetModel, build_model
from .utils import ensure_dir

logger = logging.getLogger("mcdnet.checkpoint")

MAGIC = b"MCDN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)  # ModelConfig dump
    epoch: int = 0
    best_miou: float = 0.0

    @classmethod
    def from_model(cls, model: McdNetModel, epoch: int = 0, best_miou: float = 0.0) -> "Checkpoint":
        return cls(model.state_dict(), model.config.model_dump(mode="json"), int(epoch), float(best_miou))

    @property
    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.model_validate(self.config)
        except ValueError as e:
            raise CheckpointError(f"checkpoint carries an invalid model config: {e}") from e


def _index_bytes(index: Dict[str, Any]) -> bytes:
    return json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, payloads, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(le.shape),
                        "offset": offset, "length": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    meta = {"config": ckpt.config, "epoch": int(ckpt.epoch), "best_miou": float(ckpt.best_miou)}
    index = _index_bytes({"tensors": entries, "meta": meta})
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(index)) + index + b"".join(payloads)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{source}: file shorter than the header")
    magic, version, index_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    start = _HEADER.size + index_len
    if start > len(raw):
        raise CheckpointTruncatedError(f"{source}: index extends past end of file")
    try:
        index = json.loads(raw[_HEADER.size:start].decode("utf-8"))
        entries, meta = index["tensors"], index["meta"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source}: malformed index: {e}") from e
    payload = memoryview(raw)[start:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry["name"]
        dtype = np.dtype(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        offset, length = int(entry["offset"]), int(entry["length"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if length != expected:
            raise CheckpointTruncatedError(
                f"{source}: tensor {name} has {length} bytes, shape {shape} needs {expected}")
        if offset < 0 or offset + length > len(payload):
            raise CheckpointTruncatedError(f"{source}: tensor {name} runs past end of payload")
        arr = np.frombuffer(payload[offset:offset + length], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(tensors, meta.get("config", {}), int(meta.get("epoch", 0)), float(meta.get("best_miou", 0.0)))


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info("Saved checkpoint %s (%d tensors, epoch %d)", path, len(ckpt.tensors), ckpt.epoch)
    return path


def load_checkpoint(path: Path | str, model: Optional[McdNetModel] = None) -> Checkpoint:
    """Read a checkpoint; when `model` is given its parameters are loaded strictly."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    ckpt = decode_checkpoint(raw, str(path))
    if model is not None:
        model.load_state_dict(ckpt.tensors)
    return ckpt


def restore_model(ckpt: Checkpoint, dtype: Optional[np.dtype] = None) -> McdNetModel:
    """Rebuild the model described by the checkpoint and load its tensors."""
    model = build_model(ckpt.model_config, dtype=dtype or np.float32)
    model.load_state_dict(ckpt.tensors)
    model.eval()
    return model
