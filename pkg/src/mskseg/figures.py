"""Matplotlib renders for the report-producing commands.

Every function writes one PNG next to the delimited output it mirrors.
The Agg backend is forced so the renders work in headless runs; nothing
here opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .volio import CovTable, MetricsReport


def save_loss_curve(curve, path) -> None:
    """Total and per-term training loss against epoch."""
    epochs = [e.epoch for e in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [e.total for e in curve], label="total", linewidth=2)
    ax.plot(epochs, [e.l_cls for e in curve], label="classification")
    ax.plot(epochs, [e.l_bbox for e in curve], label="box regression")
    ax.plot(epochs, [e.l_mask for e in curve], label="mask")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_metric_bars(report: MetricsReport, path) -> None:
    """Grouped bars of Dice, precision and AP per class; distances get
    their own axis since they are in length units, not [0, 1]."""
    names = [c.name for c in report.classes]
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))

    for off, field, label in ((-0.25, "dice", "Dice"), (0.0, "precision", "precision"),
                              (0.25, "ap", "AP")):
        vals = [getattr(c, field) for c in report.classes]
        vals = [v if v is not None else np.nan for v in vals]
        ax1.bar(x + off, vals, width=0.25, label=label)
    ax1.set_xticks(x, names, rotation=30, ha="right")
    ax1.set_ylim(0, 1.05)
    ax1.set_ylabel("score")
    ax1.legend()

    for off, field, label in ((-0.125, "hausdorff", "Hausdorff"),
                              (0.125, "avg_hausdorff", "avg Hausdorff")):
        ax2.bar(x + off, [getattr(c, field) for c in report.classes], width=0.25, label=label)
    ax2.set_xticks(x, names, rotation=30, ha="right")
    ax2.set_ylabel(f"distance ({report.unit})")
    ax2.legend()

    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_thickness_heatmap(values: np.ndarray, slice_spacing_mm: float, path,
                           kind: str = "thickness") -> None:
    """Angle-by-slice grid as an image; uncovered bins stay white.

    A difference grid gets a symmetric diverging scale so zero reads as
    neutral; a plain thickness grid uses a sequential scale from zero.
    """
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(8, 4))
    if kind == "difference":
        span = np.nanmax(np.abs(values)) if np.isfinite(values).any() else 1.0
        span = span or 1.0
        im = ax.imshow(values.T, aspect="auto", origin="lower", cmap="coolwarm",
                       vmin=-span, vmax=span, extent=(0, 360, 0, values.shape[1]))
    else:
        im = ax.imshow(values.T, aspect="auto", origin="lower", cmap="viridis",
                       vmin=0.0, extent=(0, 360, 0, values.shape[1]))
    ax.set_xlabel("angle (deg)")
    ax.set_ylabel(f"slice ({slice_spacing_mm:g} mm spacing)")
    fig.colorbar(im, ax=ax, label=f"{kind} (mm)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_cov_matrix(cov: CovTable, path) -> None:
    """CoV matrix with the value printed in each cell."""
    values = np.asarray(cov.values, dtype=float)
    n = len(cov.labels)
    fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.2 * n + 1))
    im = ax.imshow(values, cmap="viridis")
    ax.set_xticks(range(n), cov.labels, rotation=30, ha="right")
    ax.set_yticks(range(n), cov.labels)
    mid = (np.nanmax(values) + np.nanmin(values)) / 2 if np.isfinite(values).any() else 0.5
    for i in range(n):
        for j in range(n):
            color = "white" if values[i, j] < mid else "black"
            ax.text(j, i, f"{values[i, j]:.3f}", ha="center", va="center", color=color)
    fig.colorbar(im, ax=ax, label="CoV")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
