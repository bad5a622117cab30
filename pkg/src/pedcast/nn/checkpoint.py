"""Named-tensor checkpoint files.

Layout: an ASCII manifest (magic line, tensor count, then one
``name<TAB>shape`` line per tensor, terminated by an empty line) followed by
the tensors' values as little-endian float64 in manifest order.
"""
from __future__ import annotations

import os

import numpy as np

MAGIC = "PEDCAST-CKPT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict) -> None:
    lines = [MAGIC, str(len(tensors))]
    blobs = []
    for name, arr in tensors.items():
        if any(ch in name for ch in "\t\n"):
            raise CheckpointError(f"tensor name {name!r} contains a tab or newline")
        arr = np.asarray(arr, dtype="<f8")
        lines.append(f"{name}\t{','.join(str(d) for d in arr.shape)}")
        blobs.append(np.ascontiguousarray(arr).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_manifest(path) -> list[tuple[str, tuple]]:
    return [(n, s) for n, s, _ in _parse(path)[0]]


def _parse(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    head_end = raw.find(b"\n\n")
    if head_end < 0:
        raise CheckpointError(f"{path}: no manifest terminator")
    lines = raw[:head_end].decode("ascii").split("\n")
    if lines[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {lines[0]!r}")
    count = int(lines[1])
    entries = []
    for line in lines[2:2 + count]:
        name, shape = line.split("\t")
        dims = tuple(int(d) for d in shape.split(",") if d != "")
        entries.append((name, dims, int(np.prod(dims, dtype=np.int64))))
    if len(entries) != count:
        raise CheckpointError(f"{path}: manifest lists {len(entries)} of {count} tensors")
    return entries, raw[head_end + 2:]


def load_checkpoint(path) -> dict:
    entries, body = _parse(path)
    total = sum(n for _, _, n in entries)
    if len(body) != 8 * total:
        raise CheckpointError(f"{path}: expected {8 * total} data bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8")
    out = {}
    off = 0
    for name, dims, n in entries:
        out[name] = flat[off:off + n].reshape(dims).astype(np.float64)
        off += n
    return out
