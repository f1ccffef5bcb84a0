"""Matplotlib renderings saved next to the text reports and logs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluator import EpeReport

__all__ = ["save_loss_curve", "save_epe_bin_chart"]


def save_loss_curve(history, path) -> None:
    """Loss per iteration with validation EPE overlaid where available.

    ``history`` rows are (iteration, lr, loss, val_epe_or_None) as produced by
    the trainer.
    """
    iters = [row[0] for row in history]
    losses = [row[2] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, losses, lw=0.8, color="tab:blue", label="training loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss", color="tab:blue")
    ax.set_yscale("log")
    eval_pts = [(it, epe) for it, _, _, epe in history if epe is not None]
    if eval_pts:
        ax2 = ax.twinx()
        ax2.plot(*zip(*eval_pts), "o-", ms=3, color="tab:red", label="validation EPE")
        ax2.set_ylabel("validation EPE (px)", color="tab:red")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_epe_bin_chart(report: EpeReport, path) -> None:
    """Bar chart of the velocity and boundary-distance bin EPEs."""
    stats = list(report.velocity) + list(report.boundary)
    labels = [s.label for s in stats]
    values = [s.epe if s.epe is not None else 0.0 for s in stats]
    colors = ["tab:blue"] * len(report.velocity) + ["tab:orange"] * len(report.boundary)
    fig, ax = plt.subplots(figsize=(7, 4))
    bars = ax.bar(labels, values, color=colors)
    for bar, stat in zip(bars, stats):
        note = f"n={stat.count}" if stat.epe is not None else "empty"
        ax.annotate(note, (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.axhline(report.mean_epe, color="gray", ls="--", lw=0.8,
               label=f"mean EPE {report.mean_epe:.3f}")
    ax.set_ylabel("EPE (px)")
    ax.set_xlabel("ground-truth speed bins / boundary distance bins")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
