"""Dataset cache: a little-endian binary container plus a JSON sidecar.

Layout of ``<name>.bin``::

    magic    8 bytes   b"CCNPDAT1"
    version  u32
    count    u32
    count x record:
        n_points u32, y_dim u32, n_coeffs u32
        x       f64[n_points]
        y       f64[n_points * y_dim]   (row-major)
        coeffs  f64[n_coeffs]

``<name>.meta.json`` carries the generating spec, seed, split sizes and the
family id of every record, so a load reproduces the ``MetaDataset`` bitwise.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .datagen import Instantiation, MetaDataset

MAGIC = b"CCNPDAT1"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_RECORD = struct.Struct("<III")
_F64 = np.dtype("<f8")


class CacheFormatError(ValueError):
    pass


def encode_instantiations(insts: list[Instantiation]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(insts))]
    for inst in insts:
        n, d = inst.y.shape
        coeffs = np.asarray(inst.coeffs, dtype=_F64)
        parts.append(_RECORD.pack(n, d, len(coeffs)))
        parts.append(np.ascontiguousarray(inst.x, dtype=_F64).tobytes())
        parts.append(np.ascontiguousarray(inst.y, dtype=_F64).tobytes())
        parts.append(coeffs.tobytes())
    return b"".join(parts)


def decode_instantiations(buf: bytes, family_ids: list[str] | None = None) -> list[Instantiation]:
    if len(buf) < _HEADER.size:
        raise CacheFormatError("truncated header")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"unsupported version {version}")
    off = _HEADER.size
    out = []
    for i in range(count):
        if off + _RECORD.size > len(buf):
            raise CacheFormatError(f"truncated record {i}")
        n, d, nc = _RECORD.unpack_from(buf, off)
        off += _RECORD.size
        need = 8 * (n + n * d + nc)
        if off + need > len(buf):
            raise CacheFormatError(f"truncated record {i}")
        x = np.frombuffer(buf, _F64, n, off).astype(np.float64)
        off += 8 * n
        y = np.frombuffer(buf, _F64, n * d, off).astype(np.float64).reshape(n, d)
        off += 8 * n * d
        coeffs = tuple(np.frombuffer(buf, _F64, nc, off).tolist())
        off += 8 * nc
        fid = family_ids[i] if family_ids else "unknown"
        out.append(Instantiation(x, y, coeffs, fid))
    if off != len(buf):
        raise CacheFormatError(f"{len(buf) - off} trailing bytes")
    return out


def save_dataset(ds: MetaDataset, directory: str | os.PathLike, name: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    insts = ds.train + ds.val + ds.test
    path = directory / f"{name}.bin"
    path.write_bytes(encode_instantiations(insts))
    meta = {
        "spec": ds.spec,
        "seed": ds.seed,
        "splits": {"train": len(ds.train), "val": len(ds.val), "test": len(ds.test)},
        "family_ids": [i.family_id for i in insts],
    }
    (directory / f"{name}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_dataset(directory: str | os.PathLike, name: str) -> MetaDataset:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}.meta.json").read_text())
    insts = decode_instantiations((directory / f"{name}.bin").read_bytes(), meta["family_ids"])
    s = meta["splits"]
    if s["train"] + s["val"] + s["test"] != len(insts):
        raise CacheFormatError("split sizes in sidecar do not match record count")
    a, b = s["train"], s["train"] + s["val"]
    return MetaDataset(insts[:a], insts[a:b], insts[b:], meta["spec"], meta["seed"])


def cache_exists(directory: str | os.PathLike, name: str) -> bool:
    directory = Path(directory)
    return (directory / f"{name}.bin").exists() and (directory / f"{name}.meta.json").exists()
