"""NHTCKPT1 checkpoint container.

Layout::

    b"NHTCKPT1"
    uint64 LE   manifest length in bytes
    manifest    UTF-8 JSON: {"format_version", "config", "meta",
                             "tensors": [{"name", "shape", "offset"}], "blob_bytes"}
    blob        little-endian float32 values, tensors at their byte offsets
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CorruptCheckpointError
from .model import ModelConfig, param_shapes

MAGIC = b"NHTCKPT1"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


def save_checkpoint(params: dict[str, np.ndarray], config: Optional[ModelConfig], path,
                    meta: Optional[dict] = None) -> None:
    table, offset = [], 0
    for name, arr in params.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(np.prod(arr.shape, dtype=np.int64)) * 4
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict() if config is not None else None,
        "meta": meta or {},
        "tensors": table,
        "blob_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], Optional[ModelConfig], dict]:
    """Return ``(params, config, meta)``; raise :class:`CorruptCheckpointError` on any defect."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    (n,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    if start + n > len(raw):
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptCheckpointError(
            f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    blob = raw[start + n:]
    if len(blob) != manifest.get("blob_bytes"):
        raise CorruptCheckpointError(
            f"{path}: blob is {len(blob)} bytes, manifest says {manifest.get('blob_bytes')}")

    params, end = {}, 0
    for entry in sorted(manifest["tensors"], key=lambda e: e["offset"]):
        shape = tuple(int(s) for s in entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 4
        off = int(entry["offset"])
        if off < end or off + size > len(blob):
            raise CorruptCheckpointError(f"{path}: tensor {entry['name']} overlaps or overruns blob")
        end = off + size
        params[entry["name"]] = np.frombuffer(blob, dtype=_F32, count=size // 4,
                                              offset=off).astype(np.float32).reshape(shape)
    order = [e["name"] for e in manifest["tensors"]]
    params = {k: params[k] for k in order}

    config = ModelConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    if config is not None:
        expected = param_shapes(config)
        for name, arr in params.items():
            if name in expected and tuple(expected[name]) != arr.shape:
                raise CorruptCheckpointError(
                    f"{path}: {name} has shape {arr.shape}, config implies {expected[name]}")
    return params, config, manifest.get("meta", {})


def load_into(params: dict[str, np.ndarray],
              loaded: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], list[str]]:
    """Copy every tensor of ``loaded`` whose name and shape match into ``params``.

    Tensors of ``params`` that are missing from ``loaded`` or disagree in shape
    keep their (fresh) initialization; their names come back as mismatches.
    """
    out, mismatches = {}, []
    for name, arr in params.items():
        src = loaded.get(name)
        if src is not None and src.shape == arr.shape:
            out[name] = np.array(src, dtype=arr.dtype)
        else:
            out[name] = arr.copy()
            mismatches.append(name)
    return out, mismatches

