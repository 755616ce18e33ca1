"""Figures for zip reports and sharing curves (written to files, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_zip_report(report, path) -> Path:
    """Shared units per layer (left) and per-task test errors along the zip (right)."""
    recs = report.layers
    layers = [r.layer for r in recs]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    width = 0.4
    ax0.bar([x - width / 2 for x in layers], [min(r.candidates_a, r.candidates_b) for r in recs], width, label="available", color="0.75")
    ax0.bar([x + width / 2 for x in layers], [r.shared for r in recs], width, label="shared", color="C0")
    ax0.set_xlabel("layer")
    ax0.set_ylabel("units")
    ax0.set_xticks(layers)
    ax0.legend(frameon=False)

    for i, task in enumerate(report.tasks):
        pre = [r.errors_pre.get(task) for r in recs]
        post = [r.errors_post.get(task, r.errors_pre.get(task)) for r in recs]
        if all(v is None for v in pre):
            continue
        color = f"C{i}"
        ax1.plot(layers, [100 * v for v in pre], "o--", color=color, alpha=0.6, label=f"{task} before retraining")
        ax1.plot(layers, [100 * v for v in post], "o-", color=color, label=f"{task} after retraining")
        if task in report.baseline:
            ax1.axhline(100 * report.baseline[task], color=color, lw=0.8, ls=":")
    ax1.set_xlabel("layers zipped")
    ax1.set_ylabel("test error (%)")
    ax1.set_xticks(layers)
    if ax1.lines:
        ax1.legend(frameon=False, fontsize=7)
    for ax in (ax0, ax1):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return _finish(fig, path)


def plot_sharing_curve(rows, path, baseline: float | None = None) -> Path:
    """Mean test error against the number of shared units, MTZ versus random sharing."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    shared = [r["shared"] for r in rows]
    ax.plot(shared, [100 * r["mtz"] for r in rows], "o-", label="MTZ")
    ax.plot(shared, [100 * r["random"] for r in rows], "s--", label="random sharing")
    if baseline is not None:
        ax.axhline(100 * baseline, color="0.5", lw=0.8, ls=":", label="before zipping")
    ax.set_xlabel("shared units")
    ax.set_ylabel("mean test error (%)")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(frameon=False)
    return _finish(fig, path)
