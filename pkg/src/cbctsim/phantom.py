"""Procedural pelvic-like CT phantoms.

Generates deterministic synthetic volumes (HU values, circular field of
view) so the degradation and enhancement pipeline can be exercised
without clinical data. Geometry is a concentric soft-tissue ellipse with
a fat layer, a pelvic bone ring, two femoral-head disks, and optional
elliptical gas pockets; organ parameters are interpolated smoothly along
the slice axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AIR_HU = -1000.0
HU_MIN = -1000.0
HU_MAX = 1000.0


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a procedural phantom. Same spec -> bit-identical volume."""

    size: tuple[int, int] = (128, 128)
    n_slices: int = 8
    seed: int = 0
    # HU intervals per tissue class, (low, high), pairwise ordered
    air_hu: tuple[float, float] = (-1000.0, -1000.0)
    fat_hu: tuple[float, float] = (-120.0, -80.0)
    soft_hu: tuple[float, float] = (0.0, 80.0)
    bone_hu: tuple[float, float] = (250.0, 900.0)
    fov_radius_frac: float = 0.48
    gas_pockets: bool = True

    def validate(self) -> None:
        h, w = self.size
        if h < 32 or w < 32:
            raise ValueError(f"phantom size must be >= 32x32, got {self.size}")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        for name, (lo, hi) in (
            ("air", self.air_hu),
            ("fat", self.fat_hu),
            ("soft", self.soft_hu),
            ("bone", self.bone_hu),
        ):
            if lo > hi:
                raise ValueError(f"empty {name} HU interval ({lo}, {hi})")
        order = [self.air_hu[1], self.fat_hu[0], self.fat_hu[1], self.soft_hu[0],
                 self.soft_hu[1], self.bone_hu[0]]
        if any(a > b for a, b in zip(order, order[1:])):
            raise ValueError("tissue HU intervals must be ordered air < fat < soft < bone")


@dataclass
class Volume:
    """Stack of 2D HU slices with a shared circular field of view."""

    slices: np.ndarray  # (n_slices, H, W) float32, HU
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)  # (dz, dy, dx) mm
    fov_radius_px: int = 0

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        if self.slices.ndim != 3:
            raise ValueError("slices must be a (n_slices, H, W) array")

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices.shape[1], self.slices.shape[2]

    def fov_mask(self) -> np.ndarray:
        return fov_mask(self.shape, self.fov_radius_px)


def fov_mask(shape: tuple[int, int], radius_px: float) -> np.ndarray:
    """Boolean mask of the circular field of view centered on the grid."""
    h, w = shape
    yy = np.arange(h) - (h - 1) / 2.0
    xx = np.arange(w) - (w - 1) / 2.0
    rr = np.sqrt(yy[:, None] ** 2 + xx[None, :] ** 2)
    return rr <= radius_px


def fov_radius_map(shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel distance (in px) from the grid center."""
    h, w = shape
    yy = np.arange(h) - (h - 1) / 2.0
    xx = np.arange(w) - (w - 1) / 2.0
    return np.sqrt(yy[:, None] ** 2 + xx[None, :] ** 2)


def _ellipse_mask(shape, cy, cx, ry, rx, angle=0.0):
    h, w = shape
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    if angle != 0.0:
        c, s = np.cos(angle), np.sin(angle)
        u = c * xx + s * yy
        v = -s * xx + c * yy
    else:
        u, v = xx, yy
    return (u / max(rx, 1e-6)) ** 2 + (v / max(ry, 1e-6)) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Build a deterministic multi-slice phantom from `spec`.

    Anatomy parameters are drawn once per volume and interpolated along
    the slice axis, so adjacent slices differ smoothly.
    """
    spec.validate()
    h, w = spec.size
    rng = np.random.default_rng(spec.seed)
    fov_r = spec.fov_radius_frac * min(h, w)
    # integer radius used for the actual mask so it matches Volume.fov_mask()
    fov_px = int(round(fov_r))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    # Per-volume tissue values, sampled from the spec intervals.
    air_v = rng.uniform(*spec.air_hu)
    fat_v = rng.uniform(*spec.fat_hu)
    soft_v = rng.uniform(*spec.soft_hu)
    bone_lo, bone_hi = spec.bone_hu
    bone_v = rng.uniform(bone_lo + 0.5 * (bone_hi - bone_lo), bone_hi)
    femur_v = rng.uniform(*spec.bone_hu)
    # texture amplitude tied to the soft-tissue interval width so degenerate
    # intervals produce exactly uniform tissue
    tex_amp = min(1.0, (spec.soft_hu[1] - spec.soft_hu[0]) / 80.0)

    # Organ layout endpoints (start/end of the slice stack); interpolate between.
    def lerp_pair(lo, hi):
        a = rng.uniform(lo, hi)
        b = a + rng.uniform(-0.08, 0.08) * (hi - lo + 1e-9)
        return a, np.clip(b, lo, hi)

    body_ry = lerp_pair(0.78 * fov_r, 0.92 * fov_r)
    body_rx = lerp_pair(0.85 * fov_r, 0.98 * fov_r)
    ring_r = lerp_pair(0.52 * fov_r, 0.62 * fov_r)
    ring_th = rng.uniform(0.06, 0.10) * fov_r
    fem_off = lerp_pair(0.55 * fov_r, 0.70 * fov_r)
    fem_r = lerp_pair(0.10 * fov_r, 0.15 * fov_r)
    gas_cy = lerp_pair(-0.25 * fov_r, 0.05 * fov_r)
    gas_r = lerp_pair(0.06 * fov_r, 0.14 * fov_r)
    n_gas = int(rng.integers(1, 3)) if spec.gas_pockets else 0
    gas_angles = rng.uniform(-0.6, 0.6, size=max(n_gas, 1))

    # Smooth low-amplitude soft-tissue texture, shared gradient across slices.
    tex_phase = rng.uniform(0, 2 * np.pi, size=4)

    slices = np.empty((spec.n_slices, h, w), dtype=np.float32)
    fmask = fov_mask((h, w), fov_px)
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]

    for k in range(spec.n_slices):
        t = k / max(spec.n_slices - 1, 1)

        def at(pair, t=t):
            return pair[0] + t * (pair[1] - pair[0])

        img = np.full((h, w), air_v, dtype=np.float64)

        body = _ellipse_mask((h, w), cy, cx, at(body_ry), at(body_rx))
        img[body] = fat_v
        inner = _ellipse_mask((h, w), cy, cx, 0.88 * at(body_ry), 0.88 * at(body_rx))
        img[inner] = soft_v

        # low-frequency texture inside soft tissue
        tex = tex_amp * (
            6.0 * np.sin(2 * np.pi * xx / w * 1.5 + tex_phase[0])
            + 6.0 * np.sin(2 * np.pi * yy / h * 1.3 + tex_phase[1])
            + 4.0 * np.sin(2 * np.pi * (xx + yy) / (h + w) * 2.0 + tex_phase[2] + 0.3 * t)
        )
        img[inner] += tex[inner]

        # pelvic bone ring
        rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        ring = (rr >= at(ring_r) - ring_th / 2) & (rr <= at(ring_r) + ring_th / 2) & inner
        img[ring] = bone_v

        # femoral heads
        for sgn in (-1.0, 1.0):
            fem = _ellipse_mask((h, w), cy + 0.1 * fov_r, cx + sgn * at(fem_off),
                                at(fem_r), at(fem_r))
            img[fem & body] = femur_v

        # gas pockets
        for gi in range(n_gas):
            gcy = cy + at(gas_cy) + 0.12 * fov_r * np.sin(gas_angles[gi])
            gcx = cx + 0.30 * fov_r * gas_angles[gi]
            gas = _ellipse_mask((h, w), gcy, gcx, at(gas_r), 1.3 * at(gas_r))
            img[gas & inner & ~ring] = air_v

        img[~fmask] = AIR_HU
        slices[k] = np.clip(img, HU_MIN, HU_MAX)

    return Volume(slices=slices, fov_radius_px=fov_px)
