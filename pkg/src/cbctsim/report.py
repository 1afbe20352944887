"""Evaluation reports: JSON summary, overcorrection color maps, and
CT-value histograms (CSV plus rendered figures)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import metrics as M
from .phantom import Volume


def render_colormap(diff_slice: np.ndarray, path, limit: float = 1000.0) -> None:
    """Signed overcorrection map: higher values red, lower values blue."""
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(diff_slice, cmap="bwr", vmin=-limit, vmax=limit)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046, label="HU difference")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def render_histograms(series: dict[str, tuple[np.ndarray, np.ndarray]], path) -> None:
    """Overlayed CT-value histograms; series maps label -> (counts, edges)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (counts, edges) in series.items():
        centers = (edges[:-1] + edges[1:]) / 2.0
        ax.plot(centers, counts, label=label)
    ax.set_xlabel("CT value [HU]")
    ax.set_ylabel("pixel count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_histogram_csv(series: dict[str, tuple[np.ndarray, np.ndarray]], path) -> None:
    labels = list(series)
    edges = series[labels[0]][1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo_hu", "bin_hi_hu"] + labels)
        for i in range(len(edges) - 1):
            writer.writerow([f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}"]
                            + [int(series[lab][0][i]) for lab in labels])


def evaluate_run(syn: Volume, cbct: Volume, reference: Volume, out_dir,
                 threshold: float = 600.0, hu_range=(-500.0, 500.0),
                 bins: int = 100, rois=()) -> dict:
    """Full evaluation of one generated volume.

    Emits report.json, per-slice overcorrection color maps, histogram.csv,
    and a histogram figure into `out_dir`; returns the report dict.
    """
    if not (syn.slices.shape == cbct.slices.shape == reference.slices.shape):
        raise ValueError("volumes are not aligned")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fov_r = syn.fov_radius_px

    sc_cbct = M.structural_change(syn, cbct, threshold=threshold)
    sc_ref = M.structural_change(syn, reference, threshold=threshold)

    avg = {name: M.mean_volume(v)
           for name, v in (("syn", syn), ("cbct", cbct), ("reference", reference))}
    series = {name: M.hu_histogram(a, hu_range=hu_range, bins=bins,
                                   fov_radius_px=fov_r)
              for name, a in avg.items()}

    report = {
        "threshold_hu": threshold,
        "fov_radius_px": fov_r,
        "mae_hu": {
            "syn_vs_reference": M.mae(syn, reference),
            "cbct_vs_reference": M.mae(cbct, reference),
        },
        "ssim": {
            "syn_vs_reference": M.ssim(syn, reference),
            "cbct_vs_reference": M.ssim(cbct, reference),
        },
        "structural_change": {
            "syn_vs_cbct": {"rmse_hu": sc_cbct.rmse_hu,
                            "error_pixels": sc_cbct.error_pixels},
            "syn_vs_reference": {"rmse_hu": sc_ref.rmse_hu,
                                 "error_pixels": sc_ref.error_pixels},
        },
        "ct_values": {
            name: M.ct_value_report(avg[name], avg["reference"],
                                    fov_radius_px=fov_r, hu_range=hu_range,
                                    bins=bins, rois=rois)
            for name in ("syn", "cbct", "reference")
        },
    }

    for k in range(syn.n_slices):
        render_colormap(sc_cbct.colormap[k],
                        out_dir / f"colormap_syn_vs_cbct_{k:03d}.png")
    write_histogram_csv(series, out_dir / "histogram.csv")
    render_histograms(series, out_dir / "histogram.png")
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report
