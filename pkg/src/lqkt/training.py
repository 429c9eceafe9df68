"""Training loop, losses, AUC, user split, evaluation, ensembling."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import numcore
from .features import FeatureWindow, Interaction, build_user_windows
from .model import ModelConfig, ModelParams


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_users(user_ids: list[int], train_fraction: float = 0.95) -> tuple[list[int], list[int]]:
    """Deterministic partition: sort ascending, first floor(f*n) users train.

    Always leaves at least one user on each side; requires n >= 2.
    """
    ids = sorted(set(user_ids))
    n = len(ids)
    if n < 2:
        raise ValueError(f"need at least 2 users to split, got {n}")
    n_train = min(max(1, int(math.floor(train_fraction * n))), n - 1)
    return ids[:n_train], ids[n_train:]


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------


def bce_loss_from_logit(logit: float, label: int) -> float:
    """Binary cross-entropy computed from the logit, stable at any magnitude."""
    z, y = float(logit), float(label)
    if z >= 0:
        return z - z * y + math.log1p(math.exp(-z))
    return -z * y + math.log1p(math.exp(z))


def bce_grad_from_logit(logit: float, label: int) -> float:
    """dL/dlogit = sigmoid(logit) - label."""
    return model_mod._sigmoid_scalar(logit) - float(label)


def bce_loss(prob: float, label: int) -> float:
    """Probability-form BCE; prefer the logit form inside the training loop."""
    p = min(max(float(prob), 1e-12), 1.0 - 1e-12)
    y = float(label)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under ROC via the tied-rank rank-sum identity.

    Equals the probability a random positive outscores a random negative,
    counting ties as half. Undefined when either class is absent.
    """
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    order = np.argsort(scores, kind="stable")
    ranks = np.zeros(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average of ranks i+1 .. j+1
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Window assembly
# ---------------------------------------------------------------------------


def windows_for_users(
    by_user: dict[int, list[Interaction]],
    user_ids: list[int],
    length: int,
    stride: int,
) -> list[FeatureWindow]:
    out: list[FeatureWindow] = []
    for uid in user_ids:
        out.extend(build_user_windows(by_user[uid], length, stride, uid))
    return out


def group_by_user(rows: list[Interaction]) -> dict[int, list[Interaction]]:
    by_user: dict[int, list[Interaction]] = {}
    for r in rows:
        by_user.setdefault(r.user_id, []).append(r)
    return by_user


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    train_stride: int = 0    # 0 -> seq_len // 2
    eval_stride: int = 4
    ensemble_heads: tuple = (2, 4)   # desk-scale default member head counts


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_auc: float
    seconds: float

    def log_line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.valid_auc:.6f}\t{self.seconds:.2f}"


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_auc: float = float("nan")


def predict_windows(params: ModelParams, windows: list[FeatureWindow]) -> np.ndarray:
    return np.array([model_mod.forward(w, params) for w in windows])


def train(
    model_config: ModelConfig,
    train_windows: list[FeatureWindow],
    valid_windows: list[FeatureWindow],
    cfg: TrainConfig,
    log_fn=None,
) -> TrainResult:
    """Minibatch Adam on mean per-batch BCE; keeps the best-validation epoch.

    With no validation windows every epoch logs NaN AUC and the final epoch's
    parameters are returned. epochs=0 returns the freshly initialised model.
    """
    rng = numcore.new_rng(cfg.seed)
    params = ModelParams.init(model_config, rng)
    opt = numcore.Adam(params.params(), lr=cfg.lr)
    result = TrainResult(params=params)
    if not train_windows and cfg.epochs > 0:
        raise ValueError("no training windows")
    best: ModelParams | None = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.monotonic()
        order = rng.permutation(len(train_windows))
        total_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_windows[i] for i in order[lo:lo + cfg.batch_size]]
            opt.zero_grads()
            for w in batch:
                logit, cache = model_mod.forward_logit(w, params)
                total_loss += bce_loss_from_logit(logit, w.label)
                d_logit = bce_grad_from_logit(logit, w.label) / len(batch)
                model_mod.backward_from_logit(d_logit, cache, params)
            opt.step()
        train_loss = total_loss / len(train_windows)
        if valid_windows:
            probs = predict_windows(params, valid_windows)
            labels = np.array([w.label for w in valid_windows])
            epoch_auc = auc(labels, probs)
        else:
            epoch_auc = float("nan")
        stats = EpochStats(epoch, train_loss, epoch_auc, time.monotonic() - t0)
        result.history.append(stats)
        if log_fn is not None:
            log_fn(stats)
        if valid_windows and (math.isnan(result.best_auc) or epoch_auc > result.best_auc):
            result.best_auc = epoch_auc
            result.best_epoch = epoch
            best = params.copy()
    if best is not None:
        result.params = best
    return result


# ---------------------------------------------------------------------------
# Evaluation and ensembling
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    auc: float
    loss: float
    n_examples: int
    per_model_aucs: list[float] = field(default_factory=list)


def check_ensemble_compatible(members: list[ModelParams]) -> None:
    base = members[0].config
    for m in members[1:]:
        c = m.config
        if (c.d, c.seq_len, c.n_questions) != (base.d, base.seq_len, base.n_questions):
            raise ValueError(
                "ensemble members disagree on core dimensions: "
                f"(d={base.d}, seq_len={base.seq_len}, n_questions={base.n_questions}) vs "
                f"(d={c.d}, seq_len={c.seq_len}, n_questions={c.n_questions})"
            )


def ensemble_predict(members: list[ModelParams], windows: list[FeatureWindow]) -> np.ndarray:
    """Mean of member probabilities (not logits)."""
    if not members:
        raise ValueError("empty ensemble")
    check_ensemble_compatible(members)
    acc = np.zeros(len(windows))
    for m in members:
        acc += predict_windows(m, windows)
    return acc / len(members)


def evaluate(members: list[ModelParams], windows: list[FeatureWindow]) -> EvalReport:
    """AUC + mean BCE of the (possibly single-member) probability-mean ensemble."""
    if not windows:
        raise ValueError("no evaluation windows")
    labels = np.array([w.label for w in windows])
    per_probs = [predict_windows(m, windows) for m in members]
    probs = np.mean(per_probs, axis=0)
    loss = float(np.mean([bce_loss(p, y) for p, y in zip(probs, labels)]))
    per_aucs = [auc(labels, pp) for pp in per_probs] if len(members) > 1 else []
    return EvalReport(
        auc=auc(labels, probs), loss=loss, n_examples=len(windows), per_model_aucs=per_aucs
    )


def question_mean_baseline(
    train_rows: list[Interaction], windows: list[FeatureWindow]
) -> np.ndarray:
    """Score each window by its target question's training-set accuracy.

    Questions unseen in training fall back to the global mean.
    """
    totals: dict[int, list[int]] = {}
    n_right = 0
    for r in train_rows:
        acc = totals.setdefault(r.question_id, [0, 0])
        acc[0] += r.answered_correctly
        acc[1] += 1
        n_right += r.answered_correctly
    global_mean = n_right / len(train_rows) if train_rows else 0.5
    out = np.zeros(len(windows))
    for idx, w in enumerate(windows):
        qid = int(w.question_id[-1]) - 1    # token -> raw id
        s, n = totals.get(qid, (0, 0))
        out[idx] = s / n if n else global_mean
    return out
