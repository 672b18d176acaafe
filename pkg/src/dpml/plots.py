"""Static figures from run logs and reports (matplotlib, Agg backend)."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def loss_curve(log_path, out_path, manifest_hash: str = "") -> Path:
    """Outer loss and dev MSE per epoch from a ``train_log.jsonl``."""
    rows = _read_log(log_path)
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r["mean_l2"] for r in rows], label="train L2")
    if any(r.get("mean_l1") is not None for r in rows):
        ax.plot(epochs, [r.get("mean_l1") for r in rows], label="train L1", alpha=0.7)
    if all("dev" in r for r in rows):
        ax.plot(epochs, [r["dev"]["mse"] for r in rows], label="dev MSE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (log volume)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Description": f"manifest {manifest_hash}"})
    plt.close(fig)
    return Path(out_path)


def metric_bars(report, out_path) -> Path:
    """One horizontal bar panel per metric for every row of an EvalReport."""
    names = list(report.rows)
    fig, axes = plt.subplots(1, 3, figsize=(11, 0.35 * len(names) + 1.5), sharey=True)
    for ax, key in zip(axes, ("mse", "mae", "acc")):
        ax.barh(names, [report.rows[n]["aggregate"][key] for n in names], color="0.55")
        ax.set_title(key.upper())
    axes[0].invert_yaxis()   # first row on top
    fig.suptitle(f"{report.split} split")
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Description": f"manifest {report.manifest_hash}"})
    plt.close(fig)
    return Path(out_path)
