"""Checkpoint archive ``tfk-ckpt-v1``.

Layout::

    b"tfk-ckpt-v1\\n"
    uint64 little-endian header length
    UTF-8 JSON header: {"config": ..., "config_digest": sha256-hex,
                        "records": [{"name", "shape", "dtype", "offset", "nbytes"}, ...],
                        "extra": {...}}
    raw little-endian parameter values, concatenated in record order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"tfk-ckpt-v1\n"
VERSION = "tfk-ckpt-v1"


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, state: dict[str, np.ndarray], config: dict, extra: dict | None = None) -> None:
    records, chunks, offset = [], [], 0
    for name, arr in state.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        records.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": VERSION, "config": config, "config_digest": config_digest(config),
         "records": records, "extra": extra or {}},
        sort_keys=True,
    ).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return ``(state, config, extra)``; verifies magic and config digest."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a {VERSION} archive")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode())
    pos += hlen
    if config_digest(header["config"]) != header["config_digest"]:
        raise CheckpointError(f"{path}: config digest mismatch")
    state = {}
    for rec in header["records"]:
        start = pos + rec["offset"]
        raw = blob[start:start + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        state[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return state, header["config"], header.get("extra", {})
