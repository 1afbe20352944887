"""Parallel-beam Radon transform and filtered backprojection.

Images are HU grids; projection happens in attenuation space,
mu = (HU + 1000) / 2000, so air integrates to zero and sinograms of
valid images are nonnegative. Geometry is parallel-beam with bilinear
interpolation for both projection and backprojection; the filter is an
unapodized Ram-Lak ramp applied by zero-padded FFT convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .phantom import HU_MAX, HU_MIN, fov_mask


def hu_to_attenuation(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1000.0) / 2000.0


def attenuation_to_hu(mu: np.ndarray) -> np.ndarray:
    return mu * 2000.0 - 1000.0


@dataclass
class Sinogram:
    """Line integrals, shape (n_angles, n_detectors), angles uniform on [0, pi)."""

    data: np.ndarray
    angles: np.ndarray
    detector_spacing: float = 1.0
    s_max: float = 0.0  # max of the source sinogram, used by contrast clipping

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("sinogram data must be 2D (angles x detectors)")
        if self.data.shape[0] != self.angles.shape[0]:
            raise ValueError("angle count mismatch")

    @property
    def n_angles(self) -> int:
        return self.data.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.data.shape[1]

    def copy_with(self, data: np.ndarray) -> "Sinogram":
        return Sinogram(data=np.asarray(data, dtype=np.float64),
                        angles=self.angles.copy(),
                        detector_spacing=self.detector_spacing,
                        s_max=self.s_max)


def _detector_count(h: int, w: int) -> int:
    diag = int(np.ceil(np.hypot(h, w)))
    # odd count keeps a detector bin exactly on the rotation center
    return diag + 1 if diag % 2 == 0 else diag + 2


def radon(image: np.ndarray, n_angles: int = 360) -> Sinogram:
    """Parallel-beam forward projection of an HU image.

    Row k holds the line integrals at angle k*pi/n_angles. Sampling step
    along each ray is one pixel, with bilinear interpolation and zero
    (air) outside the grid.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be 2D")
    if n_angles < 1:
        raise ValueError("n_angles must be >= 1")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite pixels")

    mu = hu_to_attenuation(image)
    h, w = mu.shape
    nd = _detector_count(h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    angles = np.arange(n_angles) * np.pi / n_angles
    s = np.arange(nd) - (nd - 1) / 2.0          # detector coordinate
    t = np.arange(nd) - (nd - 1) / 2.0          # along-ray coordinate

    data = np.empty((n_angles, nd), dtype=np.float64)
    ss, tt = np.meshgrid(s, t, indexing="ij")
    for k, th in enumerate(angles):
        c, sn = np.cos(th), np.sin(th)
        # ray at detector position s, direction (-sin, cos) in (x, y)
        x = cx + ss * c - tt * sn
        y = cy + ss * sn + tt * c
        vals = map_coordinates(mu, [y.ravel(), x.ravel()], order=1,
                               mode="constant", cval=0.0)
        data[k] = vals.reshape(nd, nd).sum(axis=1)

    sino = Sinogram(data=data, angles=angles)
    sino.s_max = float(data.max(initial=0.0))
    return sino


def ramp_filter_response(n: int) -> np.ndarray:
    """Frequency response of the discrete Ram-Lak kernel at FFT length n.

    Built from the exact discrete-space kernel (1/4 at zero lag,
    -1/(pi*m)^2 at odd lags) so the low-frequency behavior is correct;
    the DC bin is forced to zero.
    """
    kernel = np.zeros(n)
    kernel[0] = 0.25
    m = np.arange(1, n // 2 + 1)
    odd = m[m % 2 == 1]
    kernel[odd] = -1.0 / (np.pi * odd) ** 2
    kernel[-odd] = -1.0 / (np.pi * odd) ** 2
    resp = 2.0 * np.real(np.fft.fft(kernel))
    resp[0] = 0.0
    return np.maximum(resp, 0.0)


def ramp_filter(sino: Sinogram) -> Sinogram:
    """Convolve each sinogram row with the Ram-Lak ramp (zero-padded FFT)."""
    nd = sino.n_detectors
    if nd < 2:
        raise ValueError("need at least 2 detector bins")
    if not np.all(np.isfinite(sino.data)):
        raise ValueError("sinogram contains non-finite values")
    n = int(2 ** np.ceil(np.log2(2 * nd)))
    resp = ramp_filter_response(n)
    spec = np.fft.fft(sino.data, n=n, axis=1) * resp[None, :]
    filtered = np.real(np.fft.ifft(spec, axis=1))[:, :nd]
    return sino.copy_with(filtered)


def fbp(sino: Sinogram, shape: tuple[int, int] | None = None,
        fov_radius_px: float | None = None, clamp_hu: bool = True) -> np.ndarray:
    """Filtered backprojection onto an HU image grid.

    Output is converted back to HU and, when `clamp_hu`, clamped to
    [-1000, 1000] with pixels outside the FOV set to -1000.
    """
    if sino.n_angles < 1:
        raise ValueError("n_angles must be >= 1")
    if shape is None:
        side = int(np.floor(sino.n_detectors / np.sqrt(2.0)))
        shape = (side, side)
    h, w = shape
    filtered = ramp_filter(sino).data

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    nd = sino.n_detectors
    y, x = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")

    recon = np.zeros((h, w), dtype=np.float64)
    for k, th in enumerate(sino.angles):
        s = x * np.cos(th) + y * np.sin(th) + (nd - 1) / 2.0
        s0 = np.floor(s).astype(int)
        frac = s - s0
        s0c = np.clip(s0, 0, nd - 1)
        s1c = np.clip(s0 + 1, 0, nd - 1)
        row = filtered[k]
        recon += row[s0c] * (1 - frac) + row[s1c] * frac

    recon *= np.pi / (2.0 * sino.n_angles)
    img = attenuation_to_hu(recon)
    if clamp_hu:
        img = np.clip(img, HU_MIN, HU_MAX)
        if fov_radius_px is not None:
            img[~fov_mask((h, w), fov_radius_px)] = HU_MIN
    return img
