"""Figure rendering for CLI reports. Headless backend; writes PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_curves(history, path: str) -> str:
    """Loss and validation AUC per epoch, twin axes."""
    epochs = [s.epoch for s in history]
    losses = [s.train_loss for s in history]
    aucs = [s.valid_auc for s in history]
    fig, ax1 = plt.subplots(figsize=(7, 4.5))
    ax1.plot(epochs, losses, "o-", color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax1.tick_params(axis="y", labelcolor="tab:blue")
    if any(not np.isnan(a) for a in aucs):
        ax2 = ax1.twinx()
        ax2.plot(epochs, aucs, "s-", color="tab:orange", label="valid AUC")
        ax2.set_ylabel("valid AUC", color="tab:orange")
        ax2.tick_params(axis="y", labelcolor="tab:orange")
    ax1.set_title("Training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def bench_scaling(rows: list[dict], path: str) -> str:
    """Score-stage MACs and wall time vs window length for both variants."""
    lengths = [r["L"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4.2))
    ax1.plot(lengths, [r["last_query_macs"] for r in rows], "o-", label="last-query")
    ax1.plot(lengths, [r["full_macs"] for r in rows], "s-", label="full")
    ax1.set_xlabel("window length L")
    ax1.set_ylabel("score-stage MACs")
    ax1.set_yscale("log")
    ax1.set_title("Exact multiply-accumulates")
    ax1.legend()
    ax2.plot(lengths, [r["last_query_ms"] for r in rows], "o-", label="last-query")
    ax2.plot(lengths, [r["full_ms"] for r in rows], "s-", label="full")
    ax2.set_xlabel("window length L")
    ax2.set_ylabel("median ms per call")
    ax2.set_yscale("log")
    ax2.set_title("Measured wall time")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _roc_points(labels: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    tps = np.concatenate([[0], np.cumsum(y == 1)])
    fps = np.concatenate([[0], np.cumsum(y == 0)])
    n_pos = max(int((labels == 1).sum()), 1)
    n_neg = max(int((labels == 0).sum()), 1)
    return fps / n_neg, tps / n_pos


def roc_curves(named_scores: list[tuple[str, np.ndarray]], labels: np.ndarray, path: str) -> str:
    fig, ax = plt.subplots(figsize=(5.2, 5))
    for name, scores in named_scores:
        fpr, tpr = _roc_points(np.asarray(labels), np.asarray(scores))
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], "--", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
