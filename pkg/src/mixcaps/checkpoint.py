"""Binary model checkpoints.

Layout (little endian)::

    magic "MXCK" | version u16 | header_len u32 | header (UTF-8 JSON)
    | tensor payload (row-major, dtype from header) | crc32 u32 of all preceding bytes
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mixcaps.capsule import ExpertConfig
from mixcaps.errors import (
    CorruptFileError,
    FormatError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from mixcaps.gate import GateConfig, MixCaps
from mixcaps.presets import build_model

MAGIC = b"MXCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


@dataclass
class ModelCheckpoint:
    model: MixCaps
    step: int = 0
    seed: int = 0
    rng_state: dict | None = None
    train_config: dict = field(default_factory=dict)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.model.parameters().items()}


def save_checkpoint(checkpoint: ModelCheckpoint, path) -> None:
    model = checkpoint.model
    params = model.parameters()
    dtype = next(iter(params.values())).data.dtype
    header = {
        "kind": model.kind,
        "expert_config": model.experts[0].config.to_dict(),
        "gate_config": model.gate.config.to_dict() if model.gate is not None else None,
        "step": int(checkpoint.step),
        "seed": int(checkpoint.seed),
        "rng_state": checkpoint.rng_state,
        "train_config": checkpoint.train_config,
        "dtype": np.dtype(dtype).str.replace(">", "<").replace("=", "<"),
        "tensors": [[name, list(t.shape)] for name, t in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    le = np.dtype(header["dtype"])
    parts = [_PREFIX.pack(MAGIC, VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(t.data, dtype=le).tobytes() for t in params.values()]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _parse(raw: bytes, path):
    if len(raw) < _PREFIX.size + 4:
        raise TruncatedFileError(f"{path}: too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError(f"{path}: checksum mismatch")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(body[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    return header, body, start


def load_checkpoint(path, template: MixCaps | None = None) -> ModelCheckpoint:
    """Read a checkpoint; with ``template`` the stored tensors must match its shapes.

    Nothing is modified unless the whole file validates.
    """
    raw = Path(path).read_bytes()
    header, body, offset = _parse(raw, path)
    dtype = np.dtype(header["dtype"])
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) * dtype.itemsize
        if offset + n > len(body):
            raise TruncatedFileError(f"{path}: payload ends inside tensor {name!r}")
        tensors[name] = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += n
    if offset != len(body):
        raise CorruptFileError(f"{path}: {len(body) - offset} trailing bytes after tensors")

    if template is not None:
        expected = {k: v.shape for k, v in template.parameters().items()}
        for name, shape in expected.items():
            if name not in tensors:
                raise ShapeMismatchError(f"tensor {name!r} missing from checkpoint")
            if tuple(tensors[name].shape) != tuple(shape):
                raise ShapeMismatchError(
                    f"tensor {name!r}: checkpoint shape {tuple(tensors[name].shape)} vs model shape {tuple(shape)}")
        extra = set(tensors) - set(expected)
        if extra:
            raise ShapeMismatchError(f"checkpoint holds unexpected tensors {sorted(extra)}")
        model = template
    else:
        ecfg = ExpertConfig(**header["expert_config"])
        gcfg = GateConfig(**header["gate_config"]) if header["gate_config"] else None
        model = build_model(ecfg, gcfg, seed=0, kind=header["kind"])
        params = model.parameters()
        for name, t in params.items():
            if name not in tensors or tuple(tensors[name].shape) != t.shape:
                raise ShapeMismatchError(f"tensor {name!r} inconsistent with stored configs")
    for name, t in model.parameters().items():
        t.data = np.array(tensors[name], dtype=dtype)
    return ModelCheckpoint(model=model, step=header["step"], seed=header["seed"],
                           rng_state=header["rng_state"], train_config=header.get("train_config") or {})
