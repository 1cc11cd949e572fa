"""Parameter checkpoints: JSON manifest followed by raw little-endian f64 arrays.

::

    magic     8 bytes  b"CCNPCKP1"
    length    u64      byte length of the manifest
    manifest  UTF-8 JSON {"architecture": ..., "params": [{"name", "shape", "offset"}], "meta": ...}
    data      concatenated arrays; ``offset`` is relative to the start of data
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import Architecture, CCNPModel

MAGIC = b"CCNPCKP1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(model: CCNPModel, meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"architecture": model.arch.to_dict(), "params": entries, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode()
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(blobs)


def save_checkpoint(path: str | os.PathLike, model: CCNPModel, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, meta))
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = _LEN.unpack_from(buf, 8)
    start = 8 + _LEN.size
    manifest = json.loads(buf[start:start + n].decode())
    data = buf[start + n:]
    arrays = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + 8 * count > len(data):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(data, "<f8", count, e["offset"]).astype(np.float64).reshape(e["shape"])
    return manifest, arrays


def load_checkpoint(path: str | os.PathLike, model: CCNPModel | None = None) -> CCNPModel:
    """Load into ``model`` (verifying every name and shape) or build a fresh one from the manifest."""
    manifest, arrays = read_checkpoint(path)
    arch = Architecture.from_dict(manifest["architecture"])
    if model is None:
        model = CCNPModel(arch)
    elif model.arch.branches != arch.branches or model.arch.attention != arch.attention:
        raise CheckpointError(
            f"{path}: checkpoint architecture {arch.branches}/attention={arch.attention} does not match "
            f"model {model.arch.branches}/attention={model.arch.attention}"
        )
    try:
        model.load_state_dict(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model


def checkpoint_meta(path: str | os.PathLike) -> dict:
    return read_checkpoint(path)[0]


def params_digest(model: CCNPModel) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
