"""Checkpoint files.

Layout::

    b"OPQCKPT1"                      magic
    <manifest JSON>\\n                one line, compact, sorted keys
    <float32 little-endian blobs>     in manifest order

The manifest holds ``{"arch": {...}, "params": [{"name", "shape", "dtype"}]}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"OPQCKPT1"


@dataclass
class ModelCheckpoint:
    arch: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path: str | os.PathLike, arch: dict, state: dict[str, np.ndarray]) -> None:
    names = list(state)
    manifest = {
        "arch": arch,
        "params": [{"name": n, "shape": list(state[n].shape), "dtype": "float32"} for n in names],
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise ValueError(f"{path}: truncated manifest")
    manifest = json.loads(raw[len(MAGIC):nl].decode("utf-8"))
    offset = nl + 1
    params = {}
    for entry in manifest["params"]:
        if entry["dtype"] != "float32":
            raise ValueError(f"{path}: unsupported dtype {entry['dtype']} for {entry['name']}")
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated blob for {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4,
                                              offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after last blob")
    return ModelCheckpoint(manifest["arch"], params)
