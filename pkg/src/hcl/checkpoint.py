"""Versioned binary checkpoint: named float64 matrices plus a JSON header."""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"HCLC"
VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is malformed or inconsistent with the model."""


def save_checkpoint(path: str, params: dict[str, np.ndarray], meta: dict) -> None:
    """Write parameters as little-endian row-major float64 blocks."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2:
                raise CheckpointError(f"parameter {name!r} is not a matrix")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def _read(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read(fh, 4, "meta length"))
        meta = json.loads(_read(fh, meta_len, "meta").decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4, "parameter count"))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "name").decode("utf-8")
            rows, cols = struct.unpack("<II", _read(fh, 8, "shape"))
            data = _read(fh, rows * cols * 8, f"data of {name!r}")
            params[name] = np.frombuffer(data, dtype="<f8").reshape(rows, cols).copy()
    return meta, params
