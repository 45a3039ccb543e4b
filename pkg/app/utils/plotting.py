"""
SVG figures of the study: RC_max against sphere diameter and line profiles.
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed id salt and no date keep the SVG bytes reproducible
plt.rcParams["svg.hashsalt"] = "spect-study"
plt.rcParams["svg.fonttype"] = "none"
plt.rcParams["font.size"] = 10
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3

SVG_METADATA = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f"Wrote figure {path}")
    return path


def plot_rc_curves(
    curves: Dict[str, Dict[float, float]],
    path: Path,
    title: str = "",
    band: Optional[Sequence[float]] = (0.9, 1.1),
) -> Path:
    """
    One line per curve label; curves map label -> {diameter_mm: rc_max}
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, points in curves.items():
        diameters = sorted(points)
        ax.plot(diameters, [points[d] for d in diameters], marker="o", label=label)
    ax.axhline(1.0, color="k", linewidth=0.8)
    if band:
        ax.axhspan(band[0], band[1], color="tab:green", alpha=0.08)
    ax.set_xlabel("Sphere diameter (mm)")
    ax.set_ylabel("RC$_{max}$")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_profiles(
    positions: Sequence[float],
    truth: Sequence[float],
    series: Dict[str, Sequence[float]],
    path: Path,
    title: str = "",
) -> Path:
    """Reconstructed line profiles overlaid on the true profile"""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(positions, truth, color="k", linestyle="--", label="truth")
    for label, values in series.items():
        ax.plot(positions, values, label=label)
    ax.set_xlabel("Voxel index")
    ax.set_ylabel("Activity")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_loglik(traces: Dict[str, List[float]], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in traces.items():
        ax.plot(range(1, len(values) + 1), values, label=label)
    ax.set_xlabel("Update")
    ax.set_ylabel("Poisson log-likelihood")
    ax.legend(fontsize=8)
    return _save(fig, path)
