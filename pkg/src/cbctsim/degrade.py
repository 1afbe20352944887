"""Pseudo-CBCT creation: sinogram-domain and image-domain degradation.

The pipeline is: forward project, warp the soft-tissue sinogram with a
smoothed random displacement field while keeping the bone contribution
unwarped, adjust sinogram contrast with a clipped power law, reconstruct,
then gamma-correct two image masks and shift values at the edge of the
field of view. Every step has an ablation switch; with all switches off
the pipeline reduces exactly to reconstruct(project(image)).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .phantom import HU_MAX, HU_MIN, Volume, fov_mask, fov_radius_map
from .tomography import Sinogram, fbp, radon

SOFT_FILL_HU = 40.0

SIGMA_GRID = (8.0, 16.0, 24.0)
C0_GRID = (1.0, 1.15)
R1_GRID = (0.75, 0.85, 0.90, 0.95)
R2_TYPE1_GRID = (0.85, 0.90)  # paired with c0 = 1.0
R2_TYPE2 = 1.0                # paired with c0 = 1.15


@dataclass(frozen=True)
class DegradationParams:
    sigma: float = 16.0            # displacement noise std, sinogram px
    smooth_sigma: float = 6.0      # Gaussian smoothing of the field, px
    c0: float = 1.0                # contrast exponent, >= 1
    r1: float = 0.90               # gamma for mask 1 (whole image), (0, 1]
    r2: float = 0.90               # gamma for mask 2 (outside center circle)
    bone_threshold: float = 250.0  # HU
    mask2_radius_frac: float = 0.55
    mask3_width_px: int = 8
    mask3_shift_hu: float = 150.0
    warp: bool = True
    contrast: bool = True
    mask1: bool = True
    mask2: bool = True
    mask3: bool = True
    seed: int = 0
    n_angles: int = 360

    def validate(self) -> None:
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.smooth_sigma <= 0:
            raise ValueError("smooth_sigma must be > 0")
        if self.c0 < 1.0:
            raise ValueError("c0 must be >= 1.0")
        for name, r in (("r1", self.r1), ("r2", self.r2)):
            if not 0 < r <= 1.0:
                raise ValueError(f"{name} must be in (0, 1]")
        if not -1000 < self.bone_threshold < 1000:
            raise ValueError("bone_threshold must lie inside (-1000, 1000) HU")
        if self.mask3_width_px < 1:
            raise ValueError("mask3_width_px must be >= 1")
        if self.mask3_shift_hu < 0:
            raise ValueError("mask3_shift_hu must be >= 0")


@dataclass
class DisplacementField:
    """Per-pixel (dy, dx) displacements over sinogram coordinates."""

    dy: np.ndarray
    dx: np.ndarray

    def __post_init__(self):
        self.dy = np.asarray(self.dy, dtype=np.float64)
        self.dx = np.asarray(self.dx, dtype=np.float64)
        if self.dy.shape != self.dx.shape:
            raise ValueError("dy/dx shape mismatch")

    @property
    def shape(self):
        return self.dy.shape


def make_displacement_field(shape, sigma, smooth_sigma, rng) -> DisplacementField:
    """Gaussian i.i.d. noise N(0, sigma^2) per component, then smoothed."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        z = np.zeros(shape)
        return DisplacementField(dy=z, dx=z.copy())
    dy = gaussian_filter(rng.normal(0.0, sigma, size=shape), smooth_sigma)
    dx = gaussian_filter(rng.normal(0.0, sigma, size=shape), smooth_sigma)
    return DisplacementField(dy=dy, dx=dx)


def warp_sinogram(sino: Sinogram, fld: DisplacementField) -> Sinogram:
    """Backward-mapping bilinear resample; out-of-bounds clamps to border."""
    if fld.shape != sino.data.shape:
        raise ValueError("field shape does not match sinogram")
    na, nd = sino.data.shape
    yy, xx = np.meshgrid(np.arange(na, dtype=np.float64),
                         np.arange(nd, dtype=np.float64), indexing="ij")
    out = map_coordinates(sino.data, [yy + fld.dy, xx + fld.dx],
                          order=1, mode="nearest")
    return sino.copy_with(out)


def extract_bone_sinogram(image, bone_threshold, n_angles):
    """Forward-project the bone-only image; mask = bins the bone reaches."""
    if not -1000 < bone_threshold < 1000:
        raise ValueError("bone_threshold must lie inside (-1000, 1000) HU")
    image = np.asarray(image, dtype=np.float64)
    bone_img = np.where(image >= bone_threshold, image, HU_MIN)
    bone_sino = radon(bone_img, n_angles)
    mask = bone_sino.data > 1e-12
    return bone_sino, mask


def merge_bone(warped: Sinogram, bone_sino: np.ndarray, bone_mask: np.ndarray) -> Sinogram:
    """Recombine the warped soft-tissue sinogram with the unwarped bone part.

    `bone_sino` is the bone residual in line-integral space (full sinogram
    minus soft-filled sinogram), which is zero outside `bone_mask`, so the
    sum restores the source sinogram exactly under an identity warp.
    """
    bone_sino = np.asarray(bone_sino, dtype=np.float64)
    bone_mask = np.asarray(bone_mask, dtype=bool)
    if bone_sino.shape != warped.data.shape or bone_mask.shape != warped.data.shape:
        raise ValueError("shape mismatch between warped sinogram and bone parts")
    out = np.where(bone_mask, warped.data + bone_sino, warped.data)
    return warped.copy_with(out)


def adjust_contrast(sino: Sinogram, c0: float) -> Sinogram:
    """Power-law contrast: s_max * (s/s_max)^c0, then clip to s_max."""
    if c0 < 1.0:
        raise ValueError("c0 must be >= 1.0")
    s_max = sino.s_max
    if c0 == 1.0 or s_max <= 0:
        return sino.copy_with(sino.data.copy())
    s = np.clip(sino.data, 0.0, None)
    out = s_max * (s / s_max) ** c0
    return sino.copy_with(np.minimum(out, s_max))


def gamma_correct(image, mask, r):
    """Gamma-correct HU values inside `mask`: u^(1/r) in [0,1] space, r<1 darkens."""
    if not 0 < r:
        raise ValueError("r must be > 0")
    image = np.asarray(image, dtype=np.float64)
    if r == 1.0:
        return image.copy()
    u = np.clip((image + 1000.0) / 2000.0, 0.0, 1.0)
    corrected = u ** (1.0 / r) * 2000.0 - 1000.0
    out = image.copy()
    out[mask] = corrected[mask]
    return out


def edge_shift(image, fov_radius_px, mask3_width_px, mask3_shift_hu):
    """Darken an annulus just inside the FOV boundary, ramping 0 -> shift."""
    if mask3_width_px < 1:
        raise ValueError("mask3_width_px must be >= 1")
    if mask3_shift_hu < 0:
        raise ValueError("shift must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    rr = fov_radius_map(image.shape)
    inner = fov_radius_px - mask3_width_px
    ramp = np.clip((rr - inner) / mask3_width_px, 0.0, 1.0)
    ramp[rr > fov_radius_px] = 0.0
    out = image - ramp * mask3_shift_hu
    return np.maximum(out, HU_MIN)


def mask2_region(shape, fov_radius_px, radius_frac):
    """Inside the FOV but outside the central circle of radius frac * FOV."""
    rr = fov_radius_map(shape)
    return (rr > radius_frac * fov_radius_px) & (rr <= fov_radius_px)


def simulate_cbct(image, params: DegradationParams, fov_radius_px: float,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the full degradation pipeline on one HU slice."""
    params.validate()
    image = np.asarray(image, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(params.seed)

    sino = radon(image, params.n_angles)

    if params.warp:
        soft_img = np.where(image >= params.bone_threshold, SOFT_FILL_HU, image)
        soft_sino = radon(soft_img, params.n_angles)
        # bone residual in line-integral space: exact additive complement
        bone_data = sino.data - soft_sino.data
        bone_mask = extract_bone_sinogram(image, params.bone_threshold,
                                          params.n_angles)[1]
        fld = make_displacement_field(sino.data.shape, params.sigma,
                                      params.smooth_sigma, rng)
        warped = warp_sinogram(soft_sino, fld)
        warped.s_max = sino.s_max
        sino = merge_bone(warped, bone_data, bone_mask)

    if params.contrast:
        sino = adjust_contrast(sino, params.c0)

    out = fbp(sino, shape=image.shape, fov_radius_px=fov_radius_px)

    fmask = fov_mask(image.shape, fov_radius_px)
    if params.mask1:
        out = gamma_correct(out, fmask, params.r1)
    if params.mask2:
        m2 = mask2_region(image.shape, fov_radius_px, params.mask2_radius_frac)
        out = gamma_correct(out, m2, params.r2)
    if params.mask3:
        out = edge_shift(out, fov_radius_px, params.mask3_width_px,
                         params.mask3_shift_hu)

    out = np.clip(out, HU_MIN, HU_MAX)
    out[~fmask] = HU_MIN
    return out


def simulate_volume(volume, params: DegradationParams, per_slice: bool = True):
    """Degrade every slice of a volume.

    With `per_slice`, each slice gets its own parameter draw from the
    sampling grid (substream seeded by (params.seed, slice index));
    otherwise one draw is shared. Returns (degraded slices, params list).
    """
    out = np.empty_like(volume.slices, dtype=np.float32)
    used = []
    shared = None
    if not per_slice:
        shared = sample_params(np.random.default_rng(params.seed), base=params)
        used.append(shared)
    for k in range(volume.n_slices):
        rng = np.random.default_rng([params.seed, k])
        p = shared if shared is not None else sample_params(rng, base=params)
        out[k] = simulate_cbct(volume.slices[k], p, volume.fov_radius_px, rng=rng)
        if per_slice:
            used.append(p)
    return Volume(slices=out, spacing=volume.spacing,
                  fov_radius_px=volume.fov_radius_px), used


def sample_params(rng: np.random.Generator,
                  base: DegradationParams | None = None) -> DegradationParams:
    """Draw a parameter set from the evaluation grid.

    sigma in {8, 16, 24}; c0 in {1.0, 1.15}; r1 in {0.75, 0.85, 0.90, 0.95}.
    r2 is coupled to c0: Type-1 draws (c0 = 1.0) use r2 in {0.85, 0.90},
    Type-2 draws (c0 = 1.15) fix r2 = 1.0.
    """
    if base is None:
        base = DegradationParams()
    sigma = float(rng.choice(SIGMA_GRID))
    c0 = float(rng.choice(C0_GRID))
    r1 = float(rng.choice(R1_GRID))
    r2 = R2_TYPE2 if c0 > 1.0 else float(rng.choice(R2_TYPE1_GRID))
    return replace(base, sigma=sigma, c0=c0, r1=r1, r2=r2)
