"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes   b"DTCCKPT\\0"
    version  u32
    hlen     u64       byte length of the JSON header
    header   hlen      UTF-8 JSON, keys sorted, no whitespace
    blobs              raw little-endian float64 tensors, back to back

The header holds ``config``, ``step``, ``rng_state``, ``meta`` and
``tensors``: a list of ``{"name", "shape", "dtype": "<f8", "offset",
"nbytes", "sha256"}`` sorted by name, with offsets relative to the start of
the blob area and the digest taken over the blob bytes. Encoding is canonical, so load followed by save reproduces the file
byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"DTCCKPT\x00"
VERSION = 2
DTYPE = "<f8"
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    step: int
    tensors: dict[str, np.ndarray]
    rng_state: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    index, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=DTYPE)
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": DTYPE,
                      "offset": offset, "nbytes": len(raw),
                      "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    header = _canonical_json({
        "config": ckpt.config,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": index,
    })
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def decode(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        if entry["dtype"] != DTYPE:
            raise CheckpointError(f"{entry['name']}: unsupported dtype {entry['dtype']}")
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{entry['name']}: blob runs past end of file")
        if hashlib.sha256(data[lo:hi]).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{entry['name']}: checksum mismatch")
        arr = np.frombuffer(data[lo:hi], dtype=DTYPE).reshape(tuple(entry["shape"]))
        tensors[entry["name"]] = arr.astype(np.float64)
    return Checkpoint(header["config"], header["step"], tensors, header["rng_state"], header["meta"])


def save(path: str | Path, ckpt: Checkpoint) -> bytes:
    data = encode(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
