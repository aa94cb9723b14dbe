"""Matplotlib renderings of the evaluation products.

Figures are written straight to files (Agg backend): the residual
histogram and the error map raster that accompany the delimited report
outputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import Histogram
from .raster import GridSpec


def render_histogram(path, hist: Histogram, scenario: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(hist.bin_centers, hist.counts, width=hist.bin_width * 0.95, color="#3465a4")
    ax.set_xlabel("signed distance to reference (m)")
    ax.set_ylabel("count")
    title = "Error distribution"
    if scenario:
        title += f" ({scenario})"
    if hist.underflow or hist.overflow:
        title += f"  [<: {hist.underflow}, >: {hist.overflow}]"
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_error_map(path, spec: GridSpec, values: np.ndarray, scenario: str = "") -> None:
    """Residual raster as a diverging-color image; NaN cells stay blank."""
    finite = values[np.isfinite(values)]
    limit = float(np.percentile(np.abs(finite), 98)) if finite.size else 1.0
    limit = max(limit, 1e-6)
    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    extent = (
        spec.origin_x,
        spec.origin_x + spec.ncols * spec.gsd,
        spec.origin_y,
        spec.origin_y + spec.nrows * spec.gsd,
    )
    im = ax.imshow(
        values,
        origin="lower",
        extent=extent,
        cmap="RdBu_r",
        vmin=-limit,
        vmax=limit,
        interpolation="nearest",
    )
    fig.colorbar(im, ax=ax, label="signed distance (m)")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(f"Error map ({scenario})" if scenario else "Error map")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
