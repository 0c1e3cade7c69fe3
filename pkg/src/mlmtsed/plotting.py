"""Report figures written next to the CSV outputs.

All functions draw on the non-interactive Agg canvas and save a PNG; nothing
is ever shown on screen.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stripping the software tag keeps reruns byte-identical across matplotlib builds
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_confidence(path, scores, class_names, hop_s=0.02, beta=None, activity=None, references=None,
                    detections=None, classes=None) -> None:
    """One panel per class: normalized confidence track, its threshold, and event bars.

    ``scores`` is ``[C, N]``; ``activity`` (optional) is the frame-wise
    likelihood ``[N, C]`` drawn for comparison. ``references`` and
    ``detections`` are lists of ``(class_id, onset_s, offset_s)``.
    """
    scores = np.asarray(scores)
    classes = list(range(scores.shape[0])) if classes is None else list(classes)
    t = np.arange(scores.shape[1]) * hop_s
    fig, axes = plt.subplots(len(classes), 1, figsize=(9, 1.9 * len(classes) + 0.4), sharex=True, squeeze=False)
    for ax, c in zip(axes[:, 0], classes):
        if activity is not None:
            ax.plot(t, np.asarray(activity)[:, c], color="0.65", lw=0.8, label="frame likelihood")
        ax.plot(t, scores[c], color="C0", lw=1.2, label="confidence")
        if beta is not None:
            ax.axhline(float(np.asarray(beta)[c]), color="C3", ls="--", lw=0.8, label="threshold")
        for rows, y, colour, name in ((references, -0.08, "k", "reference"), (detections, -0.16, "C2", "detected")):
            for k, (cid, on, off) in enumerate(r for r in (rows or []) if r[0] == c):
                ax.hlines(y, on, off, color=colour, lw=4, label=name if k == 0 else None)
        ax.set_ylim(-0.22, 1.08)
        ax.set_ylabel(class_names[c], rotation=0, ha="right", va="center")
        ax.spines[["top", "right"]].set_visible(False)
    axes[0, 0].legend(loc="upper right", fontsize=7, ncol=5, frameon=False)
    axes[-1, 0].set_xlabel("time (s)")
    _save(fig, path)


def plot_class_metrics(path, class_names, results: dict) -> None:
    """Grouped bars of per-class F1 and ER (percent); ``results`` maps decoder name -> {class: {f1, er}}."""
    names = list(results)
    x = np.arange(len(class_names))
    width = 0.8 / max(len(names), 1)
    fig, (ax_f1, ax_er) = plt.subplots(1, 2, figsize=(max(6, 1.1 * len(class_names) + 3), 3.2))
    for k, name in enumerate(names):
        f1 = [results[name][c]["f1"] for c in class_names]
        er = [results[name][c]["er"] for c in class_names]
        ax_f1.bar(x + k * width, f1, width, label=name)
        ax_er.bar(x + k * width, er, width, label=name)
    for ax, title in ((ax_f1, "F1 (%)"), (ax_er, "ER (%)")):
        ax.set_xticks(x + width * (len(names) - 1) / 2, class_names, rotation=30, ha="right")
        ax.set_title(title)
        ax.spines[["top", "right"]].set_visible(False)
    ax_f1.set_ylim(0, 105)
    ax_f1.legend(fontsize=8, frameon=False)
    _save(fig, path)


def plot_loss_curve(path, train_loss, val_loss=None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    epochs = np.arange(1, len(train_loss) + 1)
    ax.plot(epochs, train_loss, marker="o", ms=3, label="train")
    if val_loss:
        ax.plot(epochs[: len(val_loss)], val_loss, marker="s", ms=3, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss per segment")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    _save(fig, path)
