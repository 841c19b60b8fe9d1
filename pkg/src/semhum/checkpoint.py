"""Checkpoint I/O.

Format (.ckpt): one JSON line holding {name, shape, offset} per tensor,
then a newline, then one flat little-endian float64 blob.  Offsets are
byte positions into the blob.  Tensor entries are sorted by name so the
same parameters always produce the same bytes.
"""
from __future__ import annotations

import json

import numpy as np


def save_checkpoint(path, tensors: dict) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        data = np.asarray(
            arr.data if hasattr(arr, "requires_grad") else arr, dtype="<f8"
        )
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(data).tobytes())
        offset += data.nbytes
    header = json.dumps({"format": "semhum-ckpt", "tensors": entries}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: not a checkpoint (missing header line)")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: bad checkpoint header: {exc}") from None
    if header.get("format") != "semhum-ckpt":
        raise ValueError(f"{path}: unrecognized checkpoint format")
    blob = raw[nl + 1 :]
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(blob):
            raise ValueError(
                f"{path}: tensor {entry['name']!r} extends past end of blob "
                f"(need {end} bytes, have {len(blob)})"
            )
        out[entry["name"]] = (
            np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
        )
    return out
