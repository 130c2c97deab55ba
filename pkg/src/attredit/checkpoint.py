"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic  b"AECK"
    bytes 4..7    format version (u32)
    bytes 8..15   header length in bytes (u64)
    header        UTF-8 JSON (see below)
    blob region   concatenated raw little-endian tensor data

Header JSON fields: ``format_version``, ``kind`` (``stgan`` or
``classifier``), ``config`` (the full run configuration record), ``meta``
(attribute names, progress counters, optimizer step counts, RNG state),
``tensors`` (name, dtype, shape, offset, nbytes - sorted by name, offsets
into the blob region), and ``checkpoint_id`` (first 16 hex chars of the
blob region's SHA-256, so equal weights mean equal ids).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import ContractError

MAGIC = b"AECK"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    meta: dict
    tensors: Dict[str, np.ndarray]
    checkpoint_id: str = ""
    path: str = ""


def save_checkpoint(path, kind: str, config: dict, meta: dict,
                    tensors: Dict[str, np.ndarray]) -> str:
    """Write a checkpoint; returns its content id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _DTYPES:
            raise ContractError(f"unsupported tensor dtype {arr.dtype} for {name}")
        raw = arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob_region = b"".join(blobs)
    checkpoint_id = hashlib.sha256(blob_region).hexdigest()[:16]
    header = {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
              "meta": meta, "tensors": entries, "checkpoint_id": checkpoint_id}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob_region)
    return checkpoint_id


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContractError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"])
        tensors[e["name"]] = arr.reshape(e["shape"])
    return Checkpoint(kind=header["kind"], config=header["config"],
                      meta=header["meta"], tensors=tensors,
                      checkpoint_id=header["checkpoint_id"], path=str(path))
