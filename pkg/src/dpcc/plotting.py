"""Figures for evaluation reports, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dpcc.metrics import RdCurve, RdRow  # noqa: E402

__all__ = ["plot_frames", "plot_rd_curves"]

_STYLE = {
    "figure.figsize": (5.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.markersize": 5,
    "savefig.dpi": 150,
}


def plot_rd_curves(curves: Mapping[str, RdCurve], path, title: str = "") -> Path:
    """Rate (bpp) against D1 PSNR, one line per curve."""
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for name, curve in curves.items():
            ax.plot(curve.bpp, curve.psnr, "o-", label=name)
        ax.set_xlabel("bits per point")
        ax.set_ylabel("D1 PSNR (dB)")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_frames(rows: Sequence[RdRow], path) -> Path:
    """Per-frame bpp (stacked coords/features) and PSNR for one run."""
    path = Path(path)
    frames = [r.frame for r in rows]
    with plt.rc_context(_STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(5.0, 4.8))
        top.bar(frames, [r.bpp_coords for r in rows], label="coordinates")
        top.bar(frames, [r.bpp_feats for r in rows], bottom=[r.bpp_coords for r in rows], label="features")
        top.plot(frames, [r.bpp_total for r in rows], "k.", label="total")
        top.set_ylabel("bpp")
        top.legend(loc="upper right")
        colors = ["C3" if r.frame_type == "I" else "C0" for r in rows]
        bottom.scatter(frames, [r.d1_psnr for r in rows], c=colors)
        bottom.set_ylabel("D1 PSNR (dB)")
        bottom.set_xlabel("frame")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
