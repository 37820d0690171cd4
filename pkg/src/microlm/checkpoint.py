"""Checkpoint format: JSON manifest + one little-endian binary blob.

``path`` names the manifest; the blob sits next to it as ``path`` +
".bin".  Tensor bytes land in the blob at 8-byte-aligned offsets in
manifest order (sorted by name), which makes writes reproducible
byte-for-byte for identical inputs.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import InputError

FORMAT = "microlm-checkpoint-v1"

_DTYPES = {"<f4": "<f4", "<f8": "<f8", "<i4": "<i4", "<i8": "<i8",
           "|u1": "|u1", "<u4": "<u4", "|i1": "|i1", "<i2": "<i2"}


def _dtype_code(arr):
    code = np.dtype(arr.dtype).newbyteorder("<").str
    if code not in _DTYPES:
        raise InputError(f"unsupported checkpoint dtype {arr.dtype}")
    return code


def save_checkpoint(path, tensors, meta=None, tensor_meta=None):
    """Write arrays + metadata.  tensor_meta holds per-name extras
    (quantization bits, inverse scale, storage role)."""
    tensor_meta = tensor_meta or {}
    blob_name = os.path.basename(path) + ".bin"
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shape () intact
        code = _dtype_code(arr)
        raw = arr.astype(code, copy=False).tobytes()
        pad = (-offset) % 8
        offset += pad
        chunks.append(b"\x00" * pad)
        entry = {
            "name": name,
            "dtype": code,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        extra = tensor_meta.get(name)
        if extra:
            entry.update(extra)
        entries.append(entry)
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "blob": blob_name,
        "meta": meta or {},
        "tensors": entries,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path + ".bin", "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read (tensors, meta, tensor_meta) back from disk."""
    if not os.path.exists(path):
        raise InputError(f"no checkpoint at {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise InputError(f"unrecognized checkpoint format in {path}")
    blob_path = os.path.join(os.path.dirname(os.path.abspath(path)), manifest["blob"])
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    tensors = {}
    tensor_meta = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise InputError(f"blob truncated for tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
        extras = {k: v for k, v in entry.items()
                  if k not in ("name", "dtype", "shape", "offset", "nbytes")}
        if extras:
            tensor_meta[entry["name"]] = extras
    return tensors, manifest.get("meta", {}), tensor_meta
