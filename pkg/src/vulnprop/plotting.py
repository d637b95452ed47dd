"""Figures for analysis reports (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

TIER_BANDS = (
    (0, 4, "low", "#d9f0d3"),
    (4, 7, "medium", "#fee8c8"),
    (7, 9, "high", "#fdbb84"),
    (9, 10, "critical", "#e34a33"),
)

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_vpss_series(records: Sequence[dict[str, Any]], path: str | Path, title: str = "") -> Path:
    """VPSS over the sampled time points, on top of the tier bands."""
    path = Path(path)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        for lo, hi, name, color in TIER_BANDS:
            ax.axhspan(lo, hi, color=color, alpha=0.5, lw=0)
            ax.text(1.01, (lo + hi) / 2, name, transform=ax.get_yaxis_transform(), va="center", fontsize=7)
        xs = list(range(len(records)))
        ax.plot(xs, [r["vpss"] for r in records], marker="o", ms=3, color="k", lw=1.2)
        ax.set_xticks(xs)
        ax.set_xticklabels([f"t{i}" for i in xs], rotation=90 if len(xs) > 12 else 0)
        ax.set_ylim(0, 10)
        ax.set_ylabel("VPSS")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path


def plot_stage_stats(stage_stats: dict[str, dict[str, float]], path: str | Path, title: str = "") -> Path:
    """Direct/transitive P and PV counts and path lengths per pruning stage."""
    path = Path(path)
    stages = list(stage_stats)
    labels = ["declared" if s == "v0" else s for s in stages]
    panels = (
        ("Projects", "p_dir", "p_trans"),
        ("Project-versions", "pv_dir", "pv_trans"),
        ("Path length", "l_max", "l_avg"),
    )
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(9.0, 2.8))
        width = 0.38
        for ax, (name, a, b) in zip(axes, panels):
            xs = range(len(stages))
            ax.bar([x - width / 2 for x in xs], [stage_stats[s][a] for s in stages], width, label=a, color="#3182bd")
            ax.bar([x + width / 2 for x in xs], [stage_stats[s][b] for s in stages], width, label=b, color="#9ecae1")
            ax.set_xticks(list(xs))
            ax.set_xticklabels(labels)
            ax.set_title(name)
            ax.legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path
