"""Figure rendering for CLI reports (headless matplotlib)."""
from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .matrix import BYPASS, MatrixReport  # noqa: E402


def matrix_figure(report: MatrixReport, path) -> None:
    """Heatmap of the matrix: green cells bypass, grey cells are blocked."""
    grid = [[1 if v == BYPASS else 0 for v in row] for row in report.grid()]
    fig, ax = plt.subplots(figsize=(8, 3.6))
    ax.imshow(grid, cmap=ListedColormap(["#b0b0b0", "#4caf50"]), vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(len(report.columns)))
    ax.set_xticklabels([c.title for c in report.columns], rotation=30, ha="right")
    ax.set_yticks(range(len(report.rows)))
    ax.set_yticklabels(report.rows)
    for i, row in enumerate(grid):
        for j, v in enumerate(row):
            ax.text(j, i, "bypass" if v else "blocked", ha="center", va="center", fontsize=8)
    ax.set_title(f"preset {report.preset}, config {report.config_hash}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def probe_figure(profile: Sequence[Sequence[int]], secret: bytes, path,
                 threshold: Optional[int] = None, title: str = "") -> None:
    """Receiver latency per probe slot, one line per leaked byte."""
    fig, ax = plt.subplots(figsize=(9, 3.8))
    for k, lats in enumerate(profile):
        ax.plot(range(1, len(lats) + 1), lats, lw=0.8,
                label=f"byte {k}" + (f" ({secret[k]:#04x})" if k < len(secret) else ""))
    if threshold is not None:
        ax.axhline(threshold, color="black", ls="--", lw=0.8, label="threshold")
    ax.set_xlabel("probe slot (byte value + 1)")
    ax.set_ylabel("latency (cycles)")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    if len(profile) <= 8:
        ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
