"""Report figures rendered to files (non-interactive Agg backend)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_distortion(table, W: float, n: int, path) -> None:
    """Pixel pitch and distortion against latitude for a report table ``[(h, width, dis)]``."""
    R = W / (2.0 * math.pi)
    lat = np.degrees(np.arcsin(np.clip((np.array([r[0] for r in table]) - R) / R, -1.0, 1.0)))
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(lat, [r[1] for r in table], color="tab:blue", label="sphere pitch")
    ax1.axhline(W / n, color="tab:blue", ls="--", lw=0.8, label="ERP pitch W/n")
    ax1.set_xlabel("latitude (deg)")
    ax1.set_ylabel("pixel width")
    ax2 = ax1.twinx()
    ax2.plot(lat, [r[2] for r in table], color="tab:red", label="Dis")
    ax2.set_ylabel("Dis", color="tab:red")
    lines = ax1.get_legend_handles_labels()
    more = ax2.get_legend_handles_labels()
    ax1.legend(lines[0] + more[0], lines[1] + more[1], fontsize=8, loc="upper center")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_log(rows, path) -> None:
    """Losses and validation mIoU per epoch; the adaptation phase is shaded."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("loss_seg", "loss_ss", "loss_f"):
        ax1.plot(epochs, [r[key] for r in rows], marker="o", ms=3, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [r["miou_val"] for r in rows], marker="o", ms=3, color="k")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val mIoU")
    adapt = [r["epoch"] for r in rows if r["phase"] == "adapt"]
    if adapt:
        for ax in (ax1, ax2):
            ax.axvspan(min(adapt) - 0.5, max(adapt) + 0.5, color="tab:green", alpha=0.08)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_iou(names, iou, path) -> None:
    iou = np.asarray(iou, float)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    shown = np.nan_to_num(iou, nan=0.0)
    bars = ax.bar(range(len(names)), shown, color="tab:blue")
    for b, v in zip(bars, iou):
        if np.isnan(v):
            b.set_hatch("//")
            b.set_alpha(0.3)
    ax.set_xticks(range(len(names)), names, rotation=30)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(f"mIoU {np.nanmean(iou):.3f}" if np.any(~np.isnan(iou)) else "mIoU n/a")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
