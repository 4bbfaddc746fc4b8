"""Figure rendering for the report path.

CSV files remain the reproducibility contract; these PNGs are convenience
views written next to them.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def render_trace(trace: list[dict], path: str | Path, title: str = "") -> None:
    """Three stacked panels: in-range rate, multiplier, cumulative cost rate."""
    slots = [row["slot"] for row in trace]
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    axes[0].plot(slots, [row["irr_mean"] for row in trace], color="tab:blue")
    axes[0].set_ylabel("in-range rate")
    axes[1].plot(slots, [row["lambda"] for row in trace], color="tab:orange")
    axes[1].set_ylabel("lambda")
    axes[2].plot(slots, [row["cost_rate"] for row in trace], color="tab:green")
    axes[2].set_ylabel("cost rate")
    axes[2].set_xlabel("slot")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_summary(summary: list[dict], path: str | Path) -> None:
    """Grouped bars of mean CRE and RLR per (scene, method)."""
    labels = [f"s{row['scene']}/{row['method']}" for row in summary]
    x = range(len(labels))
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 1.0 * len(labels)), 6), sharex=True)
    axes[0].bar(x, [row["cre_mean"] for row in summary],
                yerr=[row["cre_std"] for row in summary], color="tab:red", capsize=3)
    axes[0].set_ylabel("CRE")
    axes[1].bar(x, [row["rlr_mean"] for row in summary],
                yerr=[row["rlr_std"] for row in summary], color="tab:purple", capsize=3)
    axes[1].set_ylabel("RLR")
    axes[1].set_xticks(list(x))
    axes[1].set_xticklabels(labels, rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curve(rows: list[dict], path: str | Path, title: str = "") -> None:
    """Episode-wise RLR and CRE during policy training."""
    episodes = [row["episode"] for row in rows]
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    axes[0].plot(episodes, [row["rlr"] for row in rows], color="tab:purple")
    axes[0].set_ylabel("RLR")
    axes[1].plot(episodes, [row["cre"] for row in rows], color="tab:red")
    axes[1].set_ylabel("CRE")
    axes[1].set_xlabel("episode")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
