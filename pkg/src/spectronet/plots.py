"""Static SVG figures: raw-vs-cleaned overlays and prediction-vs-truth scatters."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RAW_COLOR = "tab:blue"
CLEAN_COLOR = "tab:orange"

plt.rcParams["svg.hashsalt"] = "spectronet"


def overlay_figure(wavelengths, raw, cleaned, title: str = ""):
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.plot(wavelengths, raw, color=RAW_COLOR, lw=0.8, label="raw")
    ax.plot(wavelengths, cleaned, color=CLEAN_COLOR, lw=0.8, label="cleaned")
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("intensity")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", frameon=False)
    fig.tight_layout()
    return fig


def scatter_figure(truth, prediction, oxide: str, rmse: float):
    truth = np.asarray(truth, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    lo = float(min(truth.min(), prediction.min()))
    hi = float(max(truth.max(), prediction.max()))
    pad = 0.05 * (hi - lo or 1.0)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="black", lw=1, label="1:1")
    ax.scatter(truth, prediction, s=12, color=CLEAN_COLOR, label=f"RMSE {rmse:.3f}")
    ax.set_xlim(lo - pad, hi + pad)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_xlabel(f"true {oxide} (wt%)")
    ax.set_ylabel(f"predicted {oxide} (wt%)")
    ax.set_title(oxide)
    ax.legend(loc="upper left", frameon=False)
    fig.tight_layout()
    return fig


def save_svg(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
