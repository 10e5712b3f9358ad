"""Report figures, rendered to files (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curves(loss_history: list, path) -> None:
    """Loss components over iterations on a log scale, one PNG."""
    rows = np.asarray([r[:5] for r in loss_history], dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if len(rows):
        it = rows[:, 0]
        for col, label in ((1, "total"), (2, "color"), (3, "mask"), (4, "part split")):
            pos = rows[:, col] > 0
            if pos.any():
                ax.semilogy(it[pos], rows[pos, col], label=label, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_metrics_figure(report, path) -> None:
    """Bar panels for geometry, motion, and image metrics of one report."""
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
    geo = {
        k: v
        for k, v in (("CD-w", report.cd_w), ("CD-s", report.cd_s), ("CD-m", report.cd_m))
        if v is not None
    }
    motion = {}
    if report.ang_err_deg is not None:
        motion["axis angle\n(deg)"] = report.ang_err_deg
    if report.pos_err is not None:
        motion["axis pos\n(x10)"] = report.pos_err
    if isinstance(report.joint_state_err, (int, float)):
        motion["joint state"] = report.joint_state_err
    img = {}
    for t in ("0", "1"):
        if report.psnr_db and t in report.psnr_db:
            img[f"PSNR s{t}\n(dB)"] = report.psnr_db[t]
    for ax, (title, data) in zip(
        axes,
        (
            ("chamfer-L1 (x1000)", geo),
            ("joint error", motion),
            ("image quality", img),
        ),
    ):
        if data:
            ax.bar(range(len(data)), list(data.values()), color="#4878a8")
            ax.set_xticks(range(len(data)), list(data.keys()), fontsize=8)
        else:
            ax.text(0.5, 0.5, "n/a", ha="center", va="center", transform=ax.transAxes)
        ax.set_title(title, fontsize=9)
        ax.grid(True, axis="y", alpha=0.3)
    if report.joint_state_err == "F":
        axes[1].text(
            0.5, 0.9, "motion type: F", color="crimson",
            ha="center", transform=axes[1].transAxes,
        )
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
