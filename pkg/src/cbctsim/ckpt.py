"""Model checkpoint format shared by the codec and the denoiser.

A checkpoint is a JSON header line (model kind, config, tensor manifest)
followed by all tensors concatenated as a little-endian float32 blob, in
manifest order.
"""

from __future__ import annotations

import json
import os

import numpy as np

MAGIC = "cbctsim-ckpt"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, meta: dict, tensors: dict) -> None:
    manifest = [[name, list(t.shape)] for name, t in tensors.items()]
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": manifest,
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for name, _ in manifest:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, expect_kind=None):
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header in {path}: {e}") from e
    if header.get("magic") != MAGIC or header.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a supported checkpoint")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {header.get('kind')!r}, expected {expect_kind!r}")
    tensors = {}
    offset = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += 4 * n
    if offset != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after tensor blob")
    return header["kind"], header["meta"], tensors
