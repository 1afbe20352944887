"""Quantitative evaluation: MAE, SSIM, structural change, CT-value stats.

All metrics are restricted to the circular field of view. The structural
change metric thresholds the SynCT-vs-CBCT difference image (default
600 HU), reports the RMSE of the thresholded image over all FOV pixels,
and counts the surviving (overcorrected) pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phantom import Volume, fov_mask


def _as_slices(v) -> np.ndarray:
    if isinstance(v, Volume):
        return np.asarray(v.slices, dtype=np.float64)
    a = np.asarray(v, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def _fov(v, shape, fov_radius_px):
    if fov_radius_px is None and isinstance(v, Volume):
        fov_radius_px = v.fov_radius_px
    if fov_radius_px is None:
        return np.ones(shape, dtype=bool)
    return fov_mask(shape, fov_radius_px)


def mae(a, b, fov_radius_px=None) -> float:
    """Mean absolute difference in HU over FOV pixels."""
    xa, xb = _as_slices(a), _as_slices(b)
    if xa.shape != xb.shape:
        raise ValueError(f"shape mismatch {xa.shape} vs {xb.shape}")
    m = _fov(a, xa.shape[1:], fov_radius_px)
    return float(np.abs(xa - xb)[:, m].mean())


def ssim(a, b, window: int = 8, dynamic_range: float = 2000.0,
         fov_radius_px=None) -> float:
    """Mean local SSIM over uniform sliding windows centered inside the FOV.

    Windows are window x window, stride 1, fully inside the image; a
    window contributes if its center pixel lies inside the FOV.
    """
    xa, xb = _as_slices(a), _as_slices(b)
    if xa.shape != xb.shape:
        raise ValueError(f"shape mismatch {xa.shape} vs {xb.shape}")
    h, w = xa.shape[1:]
    if window > min(h, w):
        raise ValueError("window larger than image")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    m = _fov(a, (h, w), fov_radius_px)
    cy = window // 2
    centers = m[cy:cy + h - window + 1, cy:cy + w - window + 1]

    vals = []
    for sa, sb in zip(xa, xb):
        wa = np.lib.stride_tricks.sliding_window_view(sa, (window, window))
        wb = np.lib.stride_tricks.sliding_window_view(sb, (window, window))
        mu_a = wa.mean(axis=(2, 3))
        mu_b = wb.mean(axis=(2, 3))
        var_a = wa.var(axis=(2, 3))
        var_b = wb.var(axis=(2, 3))
        cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
        vals.append(s[centers].mean())
    return float(np.mean(vals))


@dataclass
class StructuralChangeReport:
    rmse_hu: float
    error_pixels: int
    threshold_hu: float
    colormap: np.ndarray  # signed thresholded difference, per slice


def structural_change(syn, cbct, threshold: float = 600.0,
                      fov_radius_px=None) -> StructuralChangeReport:
    """Thresholded difference metric for overcorrection."""
    xs, xc = _as_slices(syn), _as_slices(cbct)
    if xs.shape != xc.shape:
        raise ValueError(f"shape mismatch {xs.shape} vs {xc.shape}")
    m = _fov(syn, xs.shape[1:], fov_radius_px)
    diff = xs - xc
    thresholded = np.where(np.abs(diff) >= threshold, diff, 0.0)
    thresholded[:, ~m] = 0.0
    fov_vals = thresholded[:, m]
    rmse = float(np.sqrt((fov_vals ** 2).mean()))
    count = int(np.count_nonzero(fov_vals))
    return StructuralChangeReport(rmse_hu=rmse, error_pixels=count,
                                  threshold_hu=threshold, colormap=thresholded)


def mean_volume(v) -> np.ndarray:
    """Pixelwise mean image across slices."""
    x = _as_slices(v)
    if x.shape[0] < 1:
        raise ValueError("empty volume")
    return x.mean(axis=0)


def histogram_correlation(avg_a, avg_b, hu_range=(-500.0, 500.0),
                          bins: int = 100, fov_radius_px=None) -> float:
    """Pearson correlation of the two FOV histograms over `hu_range`."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    xa = np.asarray(avg_a, dtype=np.float64)
    xb = np.asarray(avg_b, dtype=np.float64)
    m = _fov(avg_a, xa.shape, fov_radius_px)
    ha, _ = np.histogram(xa[m], bins=bins, range=hu_range)
    hb, _ = np.histogram(xb[m], bins=bins, range=hu_range)
    ha = ha.astype(np.float64)
    hb = hb.astype(np.float64)
    if ha.std() == 0 or hb.std() == 0:
        raise ValueError("histogram has zero variance; correlation undefined")
    return float(np.corrcoef(ha, hb)[0, 1])


def hu_histogram(avg, hu_range=(-500.0, 500.0), bins: int = 100,
                 fov_radius_px=None):
    """FOV histogram counts and bin edges."""
    x = np.asarray(avg, dtype=np.float64)
    m = _fov(avg, x.shape, fov_radius_px)
    return np.histogram(x[m], bins=bins, range=hu_range)


def roi_mean(image, center, size: int = 4) -> float:
    """Mean HU over the size x size square with top-left nearest `center`."""
    img = np.asarray(image, dtype=np.float64)
    cy, cx = center
    y0 = int(round(cy - size / 2))
    x0 = int(round(cx - size / 2))
    if y0 < 0 or x0 < 0 or y0 + size > img.shape[0] or x0 + size > img.shape[1]:
        raise ValueError("ROI out of bounds")
    return float(img[y0:y0 + size, x0:x0 + size].mean())


def ct_value_report(avg_img, reference_avg, fov_radius_px=None,
                    hu_range=(-500.0, 500.0), bins: int = 100,
                    rois=()) -> dict:
    """Mean/SD, histogram correlation vs reference, and ROI means."""
    x = np.asarray(avg_img, dtype=np.float64)
    m = _fov(avg_img, x.shape, fov_radius_px)
    report = {
        "mean_hu": float(x[m].mean()),
        "std_hu": float(x[m].std()),
        "correlation": histogram_correlation(avg_img, reference_avg,
                                             hu_range=hu_range, bins=bins,
                                             fov_radius_px=fov_radius_px),
        "roi_means": [
            {"center": list(c), "mean_hu": roi_mean(x, c)} for c in rois
        ],
    }
    return report
