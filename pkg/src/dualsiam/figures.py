"""Figure rendering for reports: success/precision plots, blend-search
curves, ablation bars, and attention weight profiles.

Everything renders headless (Agg) straight to image files next to the
CSV/JSON the commands emit.  The evaluation module itself never plots;
this is a separate presentation layer used by the CLI.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import ERROR_THRESHOLDS, IOU_THRESHOLDS, EvalReport

_DPI = 150


def save_success_plot(report: EvalReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(IOU_THRESHOLDS, report.success, lw=2)
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel("success rate")
    ax.set_title(f"Success plot (AUC {report.auc:.3f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return Path(path)


def save_precision_plot(report: EvalReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ERROR_THRESHOLDS, report.precision, lw=2)
    ax.axvline(20, color="gray", ls="--", lw=1)
    ax.set_xlabel("center error threshold (px)")
    ax.set_ylabel("precision")
    ax.set_title(f"Precision plot (P@20 {report.precision_at_20:.3f})")
    ax.set_xlim(0, ERROR_THRESHOLDS[-1])
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return Path(path)


def save_blend_plot(rows: list, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    blends = [r["blend"] for r in rows]
    aucs = [r["auc"] for r in rows]
    ax.plot(blends, aucs, "o-", lw=2)
    best = max(rows, key=lambda r: r["auc"])
    ax.scatter([best["blend"]], [best["auc"]], zorder=3, color="crimson",
               label=f"best {best['blend']:.1f}")
    ax.set_xlabel("appearance weight")
    ax.set_ylabel("AUC")
    ax.set_title("Blend-weight grid search")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return Path(path)


def save_ablation_plot(rows: list, path) -> Path:
    present = [r for r in rows if r.get("present")]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    names = [r["variant"] for r in present]
    aucs = [r["auc"] for r in present]
    precs = [r["precision_at_20"] for r in present]
    x = range(len(present))
    ax.bar([i - 0.2 for i in x], aucs, width=0.4, label="AUC")
    ax.bar([i + 0.2 for i in x], precs, width=0.4, label="precision@20")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_title("Model-variant ablation")
    ax.grid(alpha=0.3, axis="y")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return Path(path)


def save_attention_plot(rows: list, path) -> Path:
    """rows: (layer, rank, channel, weight) as produced by dump_attention."""
    layers = sorted({r[0] for r in rows})
    fig, axes = plt.subplots(1, len(layers), figsize=(4.5 * len(layers), 3.5), squeeze=False)
    for ax, layer in zip(axes[0], layers):
        weights = [r[3] for r in rows if r[0] == layer]
        ax.plot(range(1, len(weights) + 1), weights, lw=2)
        ax.axhline(1.0, color="gray", ls="--", lw=1)
        ax.set_ylim(0.45, 1.55)
        ax.set_xlabel("channel rank")
        ax.set_ylabel("weight")
        ax.set_title(f"attention weights: {layer}")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return Path(path)


def save_loss_plot(rows: list, path) -> Path:
    """rows: (epoch, step, loss) from a training log."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot([r[2] for r in rows], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title("Training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return Path(path)
