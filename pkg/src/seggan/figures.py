"""Matplotlib renderings written next to the CSV reports.

Figures are presentation artifacts only: every number they show also lives in
a CSV, which remains the canonical, byte-reproducible output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["loss_curve", "comparison_chart", "prediction_panel"]


def loss_curve(records, path) -> None:
    """Per-epoch loss trajectories from a training run."""
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.gen_loss for r in records], label="generator", color="tab:blue")
    if any(r.disc_loss is not None for r in records):
        ax.plot(
            epochs,
            [r.disc_loss if r.disc_loss is not None else np.nan for r in records],
            label="discriminator",
            color="tab:red",
        )
    if any(r.adv_bce is not None for r in records):
        ax.plot(
            epochs,
            [r.adv_bce if r.adv_bce is not None else np.nan for r in records],
            label="adversarial term",
            color="tab:green",
            linestyle="--",
        )
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def comparison_chart(summaries, baseline: str, path) -> None:
    """Grouped bars of PA and mIoU per model, baseline highlighted."""
    tags = [s.model for s in summaries]
    pa = [s.mean_pa for s in summaries]
    miou = [s.miou for s in summaries]
    xs = np.arange(len(tags))
    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(tags)), 4))
    ax.bar(xs - 0.2, pa, width=0.4, label="PA", color="tab:blue")
    ax.bar(xs + 0.2, miou, width=0.4, label="mIoU", color="tab:orange")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{t}*" if t == baseline else t for t in tags], rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("fraction")
    ax.legend()
    ax.set_title("model comparison (* = baseline)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def prediction_panel(sample, pred_mask: np.ndarray, path) -> None:
    """Input image, ground truth, and predicted mask side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    panes = [
        (sample.image.data[0], "input"),
        (sample.mask.data[0], "ground truth"),
        (np.asarray(pred_mask)[0], "prediction"),
    ]
    for ax, (img, title) in zip(axes, panes):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
