#!/usr/bin/env python3
"""Regenerate figures from the CSV files written by `overlap-loop eval` and `train`.

    python3 scripts/plot_pr.py out/          # writes out/figures/*.png
"""
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def column(rows, key):
    return [float(r[key]) if r[key] != "" else float("nan") for r in rows]


def main(out):
    out = Path(out)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)

    pr = out / "eval" / "pr.csv"
    if pr.exists():
        rows = sorted(read(pr), key=lambda r: float(r["recall"]))
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(column(rows, "recall"), column(rows, "interpolated_precision"), label="interpolated")
        ax.plot(column(rows, "recall"), column(rows, "precision"), ".", ms=3, alpha=0.5, label="raw")
        ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02))
        ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(fig_dir / "pr.png", dpi=150)

    recall = out / "eval" / "recall_at_n.csv"
    if recall.exists():
        rows = read(recall)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(column(rows, "n"), column(rows, "recall"), marker="o", ms=3)
        ax.set(xlabel="N", ylabel="recall@N", ylim=(0, 1.02))
        fig.tight_layout()
        fig.savefig(fig_dir / "recall_at_n.png", dpi=150)

    history = out / "train" / "history.csv"
    if history.exists():
        rows = read(history)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(column(rows, "epoch"), column(rows, "running_loss"), label="train")
        if any(r["validation_loss"] for r in rows):
            ax.plot(column(rows, "epoch"), column(rows, "validation_loss"), label="validation")
        ax.set(xlabel="epoch", ylabel="loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(fig_dir / "loss.png", dpi=150)

    print(f"figures in {fig_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "out")
