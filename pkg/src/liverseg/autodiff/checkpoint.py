"""Parameter checkpoints: ``params.bin`` + ``manifest.json``.

``params.bin`` is a concatenation of records, one per tensor in manifest
order: uint32 ndim, ndim x uint32 extents, then float32 data in C order, all
little-endian.  The manifest lists name, shape, byte offset and byte length
of each record so a reader can seek directly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT = "liverseg-params-v1"


def encode_params(named):
    """Serialize ``{name: array}`` in insertion order; returns (blob, manifest dict)."""
    chunks, entries, offset = [], [], 0
    for name, arr in named.items():
        arr = np.asarray(arr)
        rec = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        rec += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(rec)})
        chunks.append(rec)
        offset += len(rec)
    return b"".join(chunks), {"format": FORMAT, "byte_order": "little", "dtype": "float32",
                              "tensors": entries}


def decode_params(blob, manifest):
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unknown checkpoint format {manifest.get('format')!r}")
    out = {}
    for entry in manifest["tensors"]:
        off = entry["offset"]
        (ndim,) = struct.unpack_from("<I", blob, off)
        shape = struct.unpack_from(f"<{ndim}I", blob, off + 4)
        if list(shape) != entry["shape"]:
            raise ValueError(f"shape header of {entry['name']} disagrees with manifest")
        start = off + 4 + 4 * ndim
        count = int(np.prod(shape))
        if start + 4 * count > len(blob):
            raise ValueError(f"checkpoint truncated inside {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return out


def save_params(named, directory, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob, manifest = encode_params(named)
    if extra:
        manifest.update(extra)
    (directory / "params.bin").write_bytes(blob)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return decode_params((directory / "params.bin").read_bytes(), manifest), manifest
