"""Figure rendering for the report paths: loss curves, per-domain scores,
routing-rate charts, and ablation comparisons.

Every CLI command that writes delimited output also drops the matching
figure next to it. Matplotlib runs on the Agg backend; files only.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .synthdata import DOMAIN_NAMES

PRIMITIVE_LABELS = ("sub", "cat", "mul")
EXPERT_LABELS = ("local", "global")


def plot_loss_curves(history, val_history, path):
    """Per-step training loss with a smoothed overlay, plus validation F1."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    steps = [h["step"] for h in history]
    totals = [h["total"] for h in history]
    axes[0].plot(steps, totals, lw=0.4, alpha=0.4, label="total loss")
    if len(totals) >= 10:
        ma = np.convolve(totals, np.ones(10) / 10.0, mode="valid")
        axes[0].plot(steps[9:], ma, lw=1.5, label="10-step mean")
    stage2 = [h["step"] for h in history if h["stage"] == 2]
    if stage2:
        axes[0].axvline(stage2[0], color="gray", ls="--", lw=0.8,
                        label="fine-tune start")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("training loss")
    axes[0].legend(fontsize=8)

    if val_history:
        epochs = np.arange(len(val_history))
        axes[1].plot(epochs, [v["f1"] for v in val_history], marker="o",
                     ms=3, label="mean val F1")
        for d in sorted(val_history[0]["per_domain"]):
            axes[1].plot(epochs, [v["per_domain"][d] for v in val_history],
                         lw=0.8, alpha=0.7, label=f"val F1 {DOMAIN_NAMES[d]}")
        axes[1].set_xlabel("validation pass")
        axes[1].set_ylabel("F1")
        axes[1].set_ylim(0, 1)
        axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_domain_metrics(report, path):
    """Grouped bars of F1/IoU/precision/recall per domain."""
    domains = sorted(report.per_domain)
    metrics = ("f1", "iou", "precision", "recall")
    x = np.arange(len(domains))
    width = 0.2
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, m in enumerate(metrics):
        vals = [report.per_domain[d][m] for d in domains]
        ax.bar(x + (i - 1.5) * width, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels([DOMAIN_NAMES[d] for d in domains])
    ax.set_ylim(0, 1)
    ax.axhline(report.aggregate["f1"], color="gray", ls=":", lw=0.8)
    ax.legend(fontsize=8)
    ax.set_title("test metrics per domain")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_routing_rates(report, path):
    """Selection-rate heat strips: expert blocks and primitive blocks."""
    domains = sorted(report.routing_rates)
    if not domains or not report.routing_rates[domains[0]]:
        return
    blocks = report.routing_rates[domains[0]]
    ar2_idx = [i for i, r in enumerate(blocks) if len(r) == 2]
    mdr_idx = [i for i, r in enumerate(blocks) if len(r) == 3]
    fig, axes = plt.subplots(1, 2, figsize=(11, 3.2))

    if ar2_idx:
        mat = np.array([[report.routing_rates[d][i][1] for i in ar2_idx]
                        for d in domains])
        im = axes[0].imshow(mat, vmin=0, vmax=1, cmap="viridis",
                            aspect="auto")
        axes[0].set_xticks(range(len(ar2_idx)))
        axes[0].set_xticklabels([f"block {i}" for i in ar2_idx], fontsize=8)
        axes[0].set_yticks(range(len(domains)))
        axes[0].set_yticklabels([DOMAIN_NAMES[d] for d in domains],
                                fontsize=8)
        axes[0].set_title("global-context expert rate")
        fig.colorbar(im, ax=axes[0])

    if mdr_idx:
        mat = np.array([[report.routing_rates[d][i][0] for i in mdr_idx]
                        for d in domains])
        im = axes[1].imshow(mat, vmin=0, vmax=1, cmap="magma", aspect="auto")
        axes[1].set_xticks(range(len(mdr_idx)))
        axes[1].set_xticklabels([f"block {i}" for i in mdr_idx], fontsize=8)
        axes[1].set_yticks(range(len(domains)))
        axes[1].set_yticklabels([DOMAIN_NAMES[d] for d in domains],
                                fontsize=8)
        axes[1].set_title("subtraction primitive rate")
        fig.colorbar(im, ax=axes[1])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(results, path):
    """Per-domain F1 bars for each trained variant."""
    names = list(results)
    domains = sorted(results[names[0]]["report"].per_domain)
    x = np.arange(len(names))
    width = 0.8 / max(len(domains), 1)
    fig, ax = plt.subplots(figsize=(1.8 * len(names) + 3, 4))
    for i, d in enumerate(domains):
        vals = [results[n]["report"].per_domain[d]["f1"] for n in names]
        ax.bar(x + (i - (len(domains) - 1) / 2) * width, vals, width,
               label=DOMAIN_NAMES[d])
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("test F1")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
