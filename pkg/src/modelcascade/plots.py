"""Figure rendering for calibration curves, entity histograms and run
reports. Every function writes a file and returns its path; rendering uses
the Agg backend so it works headless."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .accounting import RunReport
from .calibrate import SweepPoint
from .entity import EntityHistogram


def plot_sweep(
    points: Sequence[SweepPoint],
    path: str | Path,
    *,
    floor: float | None = None,
    chosen: float | None = None,
    performance_label: str = "accuracy",
) -> Path:
    """Performance and savings as a function of the confidence threshold."""
    thresholds = [p.threshold for p in points]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(thresholds, [p.accuracy for p in points], label=performance_label, color="tab:blue")
    ax.plot(
        thresholds,
        [p.savings_docs for p in points],
        label="savings (units)",
        color="tab:orange",
    )
    ax.plot(
        thresholds,
        [p.savings_cost for p in points],
        label="savings (cost-weighted)",
        color="tab:orange",
        linestyle="--",
        alpha=0.7,
    )
    if floor is not None:
        ax.axhline(floor, color="tab:gray", linestyle=":", label=f"floor {floor:g}")
    if chosen is not None:
        ax.axvline(chosen, color="tab:green", linestyle=":", label=f"threshold {chosen:g}")
    ax.set_xlabel("confidence threshold")
    ax.set_ylabel("fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best", fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def plot_entity_histogram(hist: EntityHistogram, path: str | Path) -> Path:
    """Distribution of entities per sentence (bar chart)."""
    keys = sorted(hist.counts) or [0]
    values = [hist.counts.get(k, 0) for k in keys]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.bar(keys, values, color="tab:blue")
    ax.set_xlabel("entities per sentence")
    ax.set_ylabel("sentence count")
    ax.set_title(f"no-entity fraction: {hist.no_entity_fraction:.3f}")
    ax.set_xticks(keys)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def plot_stage_counts(report: RunReport, path: str | Path) -> Path:
    """How many routing units each stage answered."""
    n = len(report.stage_counts)
    labels = [f"stage {i}" for i in range(n)]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, report.stage_counts, color="tab:blue")
    ax.set_ylabel(f"{report.savings_basis} answered")
    subtitle = ", ".join(f"{k}={v:.3f}" for k, v in sorted(report.performance.items()))
    title = f"savings {report.savings_docs:.3f} ({report.savings_basis})"
    if subtitle:
        title += f" | {subtitle}"
    ax.set_title(title, fontsize=10)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out
