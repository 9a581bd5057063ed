"""Report figures rendered next to the delimited outputs.

Three figure families: per-task reliability diagrams, a grouped bar chart of
region-masking AUC drops, and training curves (loss + validation AUC).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .cohort import TASKS  # noqa: E402
from .explain import CONTROL_REGION, MASKING_REGIONS  # noqa: E402

_TASK_COLORS = {"hba1c": "#1f77b4", "kidney": "#d62728", "multi": "#2ca02c"}


def reliability_figure(task: str, bins: list[dict], ece, path: Path) -> Path:
    centers, preds, obs, counts = [], [], [], []
    for row in bins:
        lo, hi = float(row["bin_low"]), float(row["bin_high"])
        centers.append((lo + hi) / 2)
        counts.append(int(row["count"]))
        preds.append(float(row["mean_pred"]))
        obs.append(float(row["obs_frac"]))

    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="perfect calibration")
    width = centers[1] - centers[0] if len(centers) > 1 else 0.1
    nonempty = [i for i, c in enumerate(counts) if c > 0]
    ax.bar([centers[i] for i in nonempty], [obs[i] for i in nonempty],
           width=width * 0.9, color=_TASK_COLORS.get(task, "gray"), alpha=0.6,
           label="observed positive fraction")
    ax.plot([centers[i] for i in nonempty], [preds[i] for i in nonempty],
            "o-", color="black", ms=4, lw=1, label="mean predicted")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("predicted probability")
    ax.set_ylabel("observed frequency")
    title = f"reliability: {task}"
    if ece is not None:
        title += f" (ECE {ece:.3f})"
    ax.set_title(title)
    ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def masking_figure(masking_rows: list[dict], path: Path) -> Path:
    regions = [CONTROL_REGION, *MASKING_REGIONS]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    width = 0.8 / len(TASKS)
    for t_idx, task in enumerate(TASKS):
        deltas = []
        for region in regions:
            match = [r for r in masking_rows if r["task"] == task and r["region"] == region]
            deltas.append(float(match[0]["delta"]) if match else 0.0)
        xs = [i + (t_idx - 1) * width for i in range(len(regions))]
        ax.bar(xs, deltas, width=width, label=task, color=_TASK_COLORS.get(task))
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xticks(range(len(regions)))
    ax.set_xticklabels(regions, rotation=20)
    ax.set_ylabel("AUC drop after masking")
    ax.set_title("region masking sensitivity")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_figure(trainlog_rows: list[dict], path: Path) -> Path:
    epochs = [int(r["epoch"]) for r in trainlog_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    for task in TASKS:
        ax1.plot(epochs, [float(r[f"loss_{task}"]) for r in trainlog_rows],
                 label=task, color=_TASK_COLORS.get(task))
        ax2.plot(epochs, [float(r[f"auc_{task}"]) for r in trainlog_rows],
                 label=task, color=_TASK_COLORS.get(task))
    ax2.plot(epochs, [float(r["mean_auc"]) for r in trainlog_rows],
             "k--", lw=1.2, label="mean")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation AUC")
    ax2.set_ylim(0, 1)
    ax1.legend(fontsize=7)
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report_figures(out_dir: Path, calibration: dict, masking_rows: list[dict],
                          trainlog_rows: list[dict]) -> list[Path]:
    produced = []
    for task in TASKS:
        entry = calibration.get(task)
        if entry:
            produced.append(reliability_figure(
                task, entry["bins"], entry.get("ece"),
                Path(out_dir) / f"fig_reliability_{task}.png"))
    produced.append(masking_figure(masking_rows, Path(out_dir) / "fig_masking_deltas.png"))
    if trainlog_rows:
        produced.append(training_figure(trainlog_rows,
                                        Path(out_dir) / "fig_training_curves.png"))
    return produced
