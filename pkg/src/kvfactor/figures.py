"""Figure rendering for the CLI report commands.

Every renderer draws through the Agg backend so it works headless, takes
the same plain rows the CSV writers receive, writes one PNG, and returns
the path it wrote. Nothing here reads or writes delimited files; the CLI
keeps figures and CSV side by side from a single data pass.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_KL_FLOOR = 1e-16


def plot_decode_trace(
    steps: Sequence[int],
    kl: Sequence[float],
    logit_gap: Sequence[float],
    top1_match: Sequence[bool],
    path: str | Path,
) -> Path:
    """Per-step divergence trace: KL on top, max-abs logit gap below.

    Steps where the greedy token disagrees are flagged on the KL panel.
    """
    path = Path(path)
    fig, (ax_kl, ax_gap) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    kl_arr = np.maximum(np.asarray(kl, dtype=float), _KL_FLOOR)
    gap_arr = np.maximum(np.asarray(logit_gap, dtype=float), _KL_FLOOR)
    ax_kl.semilogy(steps, kl_arr, marker="o", markersize=3, lw=1.0)
    miss = [s for s, ok in zip(steps, top1_match) if not ok]
    if miss:
        miss_kl = [kl_arr[list(steps).index(s)] for s in miss]
        ax_kl.plot(miss, miss_kl, "rx", markersize=7, label="top-1 mismatch")
        ax_kl.legend(loc="best", fontsize=8)
    ax_kl.set_ylabel("KL(full || compressed)")
    ax_kl.grid(True, alpha=0.3)
    ax_gap.semilogy(steps, gap_arr, marker="o", markersize=3, lw=1.0, color="tab:orange")
    ax_gap.set_ylabel("max |logit gap|")
    ax_gap.set_xlabel("decode step")
    ax_gap.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_profile_grid(
    layers: Sequence[int],
    widths: Sequence[int],
    scores: np.ndarray,
    path: str | Path,
) -> Path:
    """Heatmap of single-layer compression cost, layer by compressed width.

    ``scores[i, j]`` is the mean KL when layer ``layers[i]`` alone is held
    at width ``widths[j]``; color is log10 of that cost.
    """
    path = Path(path)
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (len(layers), len(widths)):
        raise ValueError(
            f"scores shape {scores.shape} does not match "
            f"{len(layers)} layers x {len(widths)} widths"
        )
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(widths), 0.9 + 0.42 * len(layers)))
    img = ax.imshow(np.log10(np.maximum(scores, _KL_FLOOR)), aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(widths)), [str(w) for w in widths])
    ax.set_yticks(range(len(layers)), [str(l) for l in layers])
    ax.set_xlabel("compressed width")
    ax.set_ylabel("layer")
    fig.colorbar(img, ax=ax, label="log10 mean KL")
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_comparison_bars(
    labels: Sequence[str],
    mean_kls: Sequence[float],
    ratios: Sequence[float],
    path: str | Path,
) -> Path:
    """Bar chart of mean KL per plan variant, retained ratio annotated."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(1.5 + 1.4 * len(labels), 4.5))
    xs = np.arange(len(labels))
    vals = np.maximum(np.asarray(mean_kls, dtype=float), _KL_FLOOR)
    ax.bar(xs, vals, color="tab:blue", width=0.6)
    ax.set_yscale("log")
    ax.set_xticks(xs, labels, rotation=15, ha="right")
    ax.set_ylabel("mean KL vs full model")
    for x, v, rho in zip(xs, vals, ratios):
        ax.annotate(f"rho={rho:.3f}", (x, v), textcoords="offset points",
                    xytext=(0, 4), ha="center", fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_cache_widths(
    full_width: int,
    plan_widths: Sequence[int],
    skips: Sequence[bool],
    path: str | Path,
) -> Path:
    """Per-layer cached width under a plan against the uncompressed width."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(1.5 + 0.35 * len(plan_widths), 4.0))
    xs = np.arange(len(plan_widths))
    colors = ["tab:gray" if s else "tab:blue" for s in skips]
    ax.bar(xs, plan_widths, color=colors, width=0.8)
    ax.axhline(full_width, color="tab:red", lw=1.0, ls="--", label="full width")
    ax.set_xlabel("layer")
    ax.set_ylabel("cached width per token")
    ax.set_ylim(0, full_width * 1.15)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_bound_report(
    bound: float,
    empirical_max: float,
    path: str | Path,
    *,
    corrected_bound: float | None = None,
    advisory: bool = False,
) -> Path:
    """Bound next to the measured worst case, slack readable at a glance."""
    path = Path(path)
    labels = ["bound", "empirical max"]
    values = [bound, empirical_max]
    colors = ["tab:blue", "tab:green"]
    if corrected_bound is not None:
        labels.insert(1, "corrected bound")
        values.insert(1, corrected_bound)
        colors.insert(1, "tab:cyan")
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    xs = np.arange(len(labels))
    ax.bar(xs, np.maximum(values, _KL_FLOOR), color=colors, width=0.6)
    if max(values) > 0 and max(values) / max(min(v for v in values if v > 0), _KL_FLOOR) > 50:
        ax.set_yscale("log")
    ax.set_xticks(xs, labels)
    ax.set_ylabel("worst-case output error")
    if advisory:
        ax.set_title("advisory: bound assumptions not met", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path
