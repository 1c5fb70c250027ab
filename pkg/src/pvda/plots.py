"""Static figures: training curves, schedules, recall bars, ablation comparison."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import PARAM_GROUPS, ScheduleConfig  # noqa: E402
from .training import alpha_at, lr_at, read_log  # noqa: E402


def _epoch_means(rows, key):
    epochs = sorted({int(r["epoch"]) for r in rows})
    return epochs, [np.mean([r[key] for r in rows if int(r["epoch"]) == e]) for e in epochs]


def plot_training_log(log_path: str | Path, out_dir: str | Path) -> list[Path]:
    rows = read_log(log_path)
    out = Path(out_dir)
    paths = []
    if not rows:
        return paths

    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in [("loss_location_mean", "location"), ("loss_view_mean", "view"),
                       ("loss_adversarial_mean", "adversarial"), ("loss_combined_mean", "combined")]:
        ax.plot(*_epoch_means(rows, key), label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss per sample")
    ax.legend()
    fig.tight_layout()
    paths.append(out / "losses.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)

    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    a1.step(*_epoch_means(rows, "alpha"), where="post")
    a1.set_ylabel("alpha")
    for g in PARAM_GROUPS:
        a2.step(*_epoch_means(rows, f"lr_{g}"), where="post", label=g)
    a2.set_yscale("log")
    a2.set_ylabel("learning rate")
    a2.set_xlabel("epoch")
    a2.legend(fontsize=7)
    fig.tight_layout()
    paths.append(out / "schedule.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)
    return paths


def plot_schedule(cfg: ScheduleConfig, epochs: int, path: str | Path, group: str = "classifier") -> Path:
    e = np.arange(epochs)
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    a1.step(e, [alpha_at(int(i), cfg) for i in e], where="post")
    a1.set_ylabel("alpha")
    a2.step(e, [lr_at(int(i), group, cfg) for i in e], where="post")
    a2.set_ylabel(f"lr ({group})")
    a2.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_recall_bars(reports: list[dict], path: str | Path) -> Path:
    keys = ["R@1", "R@5", "R@10", "AP"]
    x = np.arange(len(keys))
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, rep in enumerate(reports):
        ax.bar(x + i * width, [rep[k] for k in keys], width, label=rep.get("label", rep["protocol"]))
    ax.set_xticks(x + width * (len(reports) - 1) / 2, keys)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_ablation(summary: list[dict], path: str | Path) -> Path:
    reports = [{**row, "label": row["variant"], "protocol": row["variant"]} for row in summary]
    return plot_recall_bars(reports, path)
