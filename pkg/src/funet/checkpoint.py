"""Binary checkpoint format: named float32 tensors plus the run config.

Layout (all integers little-endian):

    magic   4 bytes  b"FUNT"
    version u16
    cfg_len u32      followed by cfg_len bytes of UTF-8 JSON
    count   u32      number of tensors, then per tensor:
        name_len u16, name bytes (UTF-8)
        rank     u32
        extents  rank * u32
        payload  product(extents) * 4 bytes of IEEE-754 float32, LE

Round trips are bitwise: load(save(params)) reproduces every tensor
exactly, and re-saving produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FUNT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class CheckpointMismatch(CheckpointError):
    """Checkpoint does not fit the instantiated model."""


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict) -> Path:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(params))
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    path.write_bytes(bytes(blob))
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"{path}: bad magic {bytes(view[:4])!r}")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 6
    (cfg_len,) = struct.unpack_from("<I", view, offset)
    offset += 4
    config = json.loads(bytes(view[offset : offset + cfg_len]).decode("utf-8"))
    offset += cfg_len
    (count,) = struct.unpack_from("<I", view, offset)
    offset += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", view, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", view, offset)
        offset += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(view, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        params[name] = np.ascontiguousarray(arr)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return config, params


def save_model(path, model, run_config: dict) -> Path:
    """Store the model parameters with the resolved run config embedded."""
    return save_checkpoint(path, model.state_dict(), run_config)


def load_model(path, build_model) -> tuple[object, dict]:
    """Rebuild a model from a checkpoint.

    `build_model(config_dict)` must instantiate the architecture; loading
    fails with CheckpointMismatch when the stored tensors disagree with the
    instantiated parameter names or shapes."""
    config, params = load_checkpoint(path)
    model = build_model(config)
    expected = dict(model.named_parameters())
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))[:4]
        extra = sorted(set(params) - set(expected))[:4]
        raise CheckpointMismatch(f"{path}: parameter names disagree (missing={missing}, extra={extra})")
    for name, t in expected.items():
        if params[name].shape != t.shape:
            raise CheckpointMismatch(f"{path}: {name} has shape {params[name].shape}, model expects {t.shape}")
    model.load_state_dict(params)
    return model, config
