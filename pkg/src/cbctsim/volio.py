"""Volume file format and image export.

A volume file is a single JSON header line (magic, version, geometry,
HU range) terminated by a newline, followed by the raw little-endian
32-bit float raster, slice-major then row-major. Write/read round-trips
bit-exactly.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .phantom import HU_MAX, HU_MIN, Volume

MAGIC = "cbctsim-volume"
VERSION = 1


class VolumeFormatError(ValueError):
    pass


def write_volume(volume: Volume, path) -> None:
    slices = np.asarray(volume.slices, dtype="<f4")
    n, h, w = slices.shape
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "h": h,
        "w": w,
        "n_slices": n,
        "spacing": list(volume.spacing),
        "fov_radius_px": int(volume.fov_radius_px),
        "hu_range": [HU_MIN, HU_MAX],
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(slices.tobytes())
    os.replace(tmp, path)


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"corrupt header in {path}: {e}") from e
    if header.get("magic") != MAGIC:
        raise VolumeFormatError(f"{path}: not a volume file")
    if header.get("version") != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {header.get('version')}")
    n, h, w = header["n_slices"], header["h"], header["w"]
    expected = n * h * w * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    slices = np.frombuffer(payload, dtype="<f4").reshape(n, h, w)
    lo, hi = header["hu_range"]
    if slices.min() < lo or slices.max() > hi:
        raise VolumeFormatError(f"{path}: values outside declared HU range")
    return Volume(slices=slices.copy(),
                  spacing=tuple(header["spacing"]),
                  fov_radius_px=header["fov_radius_px"])


def export_png(image, path, window=(-1000.0, 1000.0)) -> None:
    """8-bit grayscale PNG with a linear window/level mapping."""
    lo, hi = window
    if not hi > lo:
        raise ValueError(f"degenerate window {window}")
    img = np.asarray(image, dtype=np.float64)
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    data = np.round(scaled * 255.0).astype(np.uint8)
    from PIL import Image

    Image.fromarray(data, mode="L").save(path, format="PNG")
