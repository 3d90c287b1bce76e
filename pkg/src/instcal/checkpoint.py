"""Checkpoint container.

Layout::

    b"INSTCAL1"
    uint64 little-endian: byte length of the manifest
    manifest: UTF-8 JSON {"format": 1, "meta": {...},
                          "arrays": [{"name", "dtype", "shape", "trainable"}, ...]}
    raw little-endian array payloads, in manifest order
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .segnet import SegNet, SegNetConfig

MAGIC = b"INSTCAL1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class CheckpointError(ValueError):
    pass


def encode(arrays: dict, trainable: dict | None = None, meta: dict | None = None) -> bytes:
    entries, payloads = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "trainable": bool(trainable.get(name, False)) if trainable else False})
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    manifest = json.dumps({"format": 1, "meta": meta or {}, "arrays": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(payloads)


def decode(blob: bytes) -> tuple[dict, dict, dict]:
    """Return ``(arrays, trainable, meta)``."""
    if blob[:8] != MAGIC:
        raise CheckpointError("not an INSTCAL1 checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    offset = 16 + n
    arrays, trainable = {}, {}
    for e in manifest["arrays"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        size = count * dt.itemsize
        if offset + size > len(blob):
            raise CheckpointError(f"truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(e["shape"]).copy()
        trainable[e["name"]] = bool(e.get("trainable", False))
        offset += size
    if offset != len(blob):
        raise CheckpointError("trailing bytes after payloads")
    return arrays, trainable, manifest.get("meta", {})


def model_bytes(model: SegNet, meta: dict | None = None) -> bytes:
    full = {"config": model.config.to_json(), **(meta or {})}
    return encode(model.state_dict(), model.trainable(), full)


def save(path, model: SegNet, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(model_bytes(model, meta))
    return path


def from_bytes(blob: bytes) -> tuple[SegNet, dict]:
    arrays, trainable, meta = decode(blob)
    if "config" not in meta:
        raise CheckpointError("checkpoint has no model config")
    model = SegNet(SegNetConfig.from_json(meta["config"]))
    model.load_state_dict(arrays, trainable)
    return model, meta


def load(path) -> tuple[SegNet, dict]:
    return from_bytes(Path(path).read_bytes())


def digest(model: SegNet) -> str:
    return hashlib.sha256(encode(model.state_dict())).hexdigest()


def diff(a: dict, b: dict) -> list[str]:
    """Names whose arrays are not bitwise identical (or present in only one)."""
    names = sorted(set(a) | set(b))
    return [n for n in names
            if n not in a or n not in b or a[n].shape != b[n].shape
            or a[n].tobytes() != b[n].tobytes()]
