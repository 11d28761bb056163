"""Versioned binary checkpoints: a JSON header followed by raw little-endian blobs.

Layout::

    b"ADVCKPT\\0"  | uint32 format version | uint32 header length | header JSON | blobs

The header records the checkpoint kind, free-form metadata, and for every
tensor its name, dtype, shape and byte offset into the blob section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, PathError

MAGIC = b"ADVCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_checkpoint(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            arr = arr.astype(np.float32)
            dtype = "float32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise PathError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CompatibilityError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise CompatibilityError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CompatibilityError(f"{path}: checkpoint kind {header['kind']!r}, expected {kind!r}")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header, tensors


def state_to_numpy(module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def numpy_to_state(module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    import torch

    state = {k[len(prefix) :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)
