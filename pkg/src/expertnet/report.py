"""Matplotlib report rendering: training curves, confusion heatmaps and
feature-map montages, written as image files next to the text outputs."""

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(epoch_rows, path):
    """Loss and accuracy curves from a list of EpochStats."""
    epochs = [r.epoch for r in epoch_rows]
    losses = [r.train_loss for r in epoch_rows]
    train_acc = [r.train_acc for r in epoch_rows]
    val_acc = [r.val_acc for r in epoch_rows]

    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(epochs, losses, color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.grid(True, alpha=0.3)

    ax_acc.plot(epochs, train_acc, label="train", color="tab:blue")
    if not all(math.isnan(v) for v in val_acc):
        ax_acc.plot(epochs, val_acc, label="val", color="tab:orange")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy [%]")
    ax_acc.set_ylim(0, 102)
    ax_acc.legend(loc="lower right")
    ax_acc.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confusion_heatmap(counts, class_names, path):
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center",
                    fontsize=8,
                    color="white" if counts[i, j] > counts.max() / 2 else "black")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_feature_montage(images, title, path):
    """Grid of grayscale channel maps (list of (h, w) uint8 arrays)."""
    cols = max(1, int(math.ceil(math.sqrt(len(images)))))
    rows = int(math.ceil(len(images) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.4 * rows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes:
        ax.axis("off")
    for ax, img in zip(axes, images):
        ax.imshow(img, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
