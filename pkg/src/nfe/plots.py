"""Plot emission for experiment results (accuracy vs FLOPs, sparsity curves)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import ExperimentResult


def plot_accuracy_vs_flops(
    results: list[tuple[str, ExperimentResult]], path: str | Path
) -> Path:
    """Scatter of mean ensemble accuracy against mean FLOPs ratio.

    Points are ordered by FLOPs on the x axis; error bars show the sample
    standard deviation over seeds.
    """
    rows = []
    for label, res in results:
        agg = res.aggregate()
        rows.append(
            (
                agg["flops_ratio"]["mean"],
                100 * agg["ensemble_accuracy"]["mean"],
                100 * agg["ensemble_accuracy"]["std"],
                label,
            )
        )
    rows.sort(key=lambda r: r[0])
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for x, y, yerr, label in rows:
        ax.errorbar(x, y, yerr=yerr, fmt="o", capsize=3, label=label)
    ax.set_xlabel("FLOPs ratio vs dense single model")
    ax.set_ylabel("Ensemble accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_sparsity_curves(
    sweeps: dict[str, list[tuple[float, ExperimentResult]]], path: str | Path
) -> Path:
    """Accuracy-vs-sparsity lines, one per labeled sweep, with std error bars."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, sweep in sweeps.items():
        xs = [s for s, _ in sweep]
        ys = [100 * r.aggregate()["ensemble_accuracy"]["mean"] for _, r in sweep]
        es = [100 * r.aggregate()["ensemble_accuracy"]["std"] for _, r in sweep]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=label)
    ax.set_xlabel("Sparsity")
    ax.set_ylabel("Ensemble accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_ratio_curve(
    sweep: list[tuple[float, ExperimentResult]], path: str | Path
) -> Path:
    """Accuracy against the two-way grouping ratio."""
    xs = [r for r, _ in sweep]
    ys = [100 * res.aggregate()["ensemble_accuracy"]["mean"] for _, res in sweep]
    es = [100 * res.aggregate()["ensemble_accuracy"]["std"] for _, res in sweep]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3)
    ax.set_xlabel("Weight share of group 1 (two-exit split)")
    ax.set_ylabel("Ensemble accuracy (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
