"""Parameter checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"ASFCKPT1"
    4 bytes   uint32 header length n
    n bytes   UTF-8 JSON header, keys sorted:
                {"config": {...}, "config_hash": str, "seed": int,
                 "entries": [{"name": str, "shape": [int, ...]}, ...]}
    rest      float64 '<f8' values of every entry, concatenated in header order

No timestamps are written, so saving the same parameters twice yields the
same bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ASFCKPT1"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict | None = None,
                    seed: int = 0) -> Path:
    path = Path(path)
    config = config or {}
    header = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": int(seed),
        "entries": [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(params, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    offset = 12 + n
    params: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header
