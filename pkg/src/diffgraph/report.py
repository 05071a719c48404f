"""Report rendering: deterministic metrics JSON, delimited tables, and
matplotlib figures written next to them."""

from __future__ import annotations

import csv
import json
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402


def write_metrics_json(path, metrics: dict) -> None:
    """Sorted keys and fixed formatting so identical metrics give identical
    bytes."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(metrics, sort_keys=True, indent=2) + "\n")


def write_csv(path, rows: Sequence[dict], fieldnames: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})


def save_loss_curve(path, curve: Sequence[dict], x_key: str = "step", title: str = "training loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row[x_key] for row in curve]
    ys = [row["loss"] for row in curve]
    ax.plot(xs, ys, lw=1.0)
    ax.set_xlabel(x_key)
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_degree_histogram(path, gen_hist: np.ndarray, ref_hist: np.ndarray, distance: float):
    fig, ax = plt.subplots(figsize=(6, 4))
    k = max(len(gen_hist), len(ref_hist))
    xs = np.arange(k)
    gh = np.pad(gen_hist, (0, k - len(gen_hist)))
    rh = np.pad(ref_hist, (0, k - len(ref_hist)))
    width = 0.4
    ax.bar(xs - width / 2, gh, width, label="generated")
    ax.bar(xs + width / 2, rh, width, label="reference")
    ax.set_xlabel("degree")
    ax.set_ylabel("fraction of nodes")
    ax.set_title(f"degree histograms (TV distance {distance:.3f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_mae_vs_steps(path, rows: Sequence[dict], band: float):
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row["steps"] for row in rows]
    med = [row["median_mae"] for row in rows]
    ax.plot(xs, med, "o-", label="median MAE")
    for row in rows:
        ax.scatter([row["steps"]] * len(row["mae_per_seed"]), row["mae_per_seed"],
                   s=12, alpha=0.5, color="gray")
    ax.axhline(med[0] + band, ls="--", lw=0.8, color="red", label="first-row band")
    ax.set_xscale("log")
    ax.set_xlabel("reverse steps")
    ax.set_ylabel("MAE")
    ax.set_title("prediction error vs reverse-step count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
