"""DCEEG1 checkpoint format.

A single file: a plain-text manifest (one ``name dtype dims`` line per
tensor) terminated by ``end``, followed by the raw little-endian value
blocks in manifest order. Names are namespaced with '/' (for example
``eeg_encoder/block0/attn/Wq`` or ``student/proj/W``).
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

MAGIC = "DCEEG1"

_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u16": "<u2"}
_DTYPE_TAGS = {np.dtype("float32"): "f32", np.dtype("float64"): "f64",
               np.dtype("int64"): "i64", np.dtype("uint16"): "u16"}


class CheckpointError(Exception):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write name->array pairs; arrays are stored little-endian, C order."""
    header = io.StringIO()
    header.write(f"{MAGIC}\n")
    header.write(f"tensors {len(tensors)}\n")
    blocks = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.ndim:
            arr = np.ascontiguousarray(arr)   # 0-d arrays: ascontiguousarray would promote to 1-d
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name may not contain whitespace: {name!r}")
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else "-"
        header.write(f"{name} {tag} {dims}\n")
        blocks.append(arr.astype(_DTYPES[tag]).tobytes())
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for block in blocks:
            fh.write(block)


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or raw[:nl].decode("utf-8", "replace") != MAGIC:
        raise CheckpointError(f"{path}: missing {MAGIC} header")
    # locate the end of the text manifest
    end_marker = raw.find(b"\nend\n", nl)
    if end_marker < 0:
        raise CheckpointError(f"{path}: manifest not terminated with 'end'")
    lines = raw[nl + 1:end_marker].decode("utf-8").splitlines()
    body = memoryview(raw)[end_marker + len(b"\nend\n"):]
    if not lines or not lines[0].startswith("tensors "):
        raise CheckpointError(f"{path}: missing tensor count line")
    count = int(lines[0].split()[1])
    entries = lines[1:]
    if len(entries) != count:
        raise CheckpointError(f"{path}: manifest lists {len(entries)} tensors, header says {count}")

    out: dict[str, np.ndarray] = {}
    offset = 0
    for line in entries:
        name, tag, dims = line.split(" ")
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag!r} for {name!r}")
        shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
        dt = np.dtype(_DTYPES[tag])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated block for tensor {name!r}")
        out[name] = np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after last tensor")
    return out
