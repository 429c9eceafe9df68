"""Raw interaction logs -> five model features -> embedded sequence.

The five per-position features are: question id, question part, answer
correctness, time spent on the current question, and the timestamp gap to
the previous question (capped at three days). The first three are
categorical tokens with 0 reserved for padding; the two continuous channels
are normalized into [0, 1].

Windows are fixed length L, left-padded. The final position is the
prediction target: its correctness token is UNKNOWN and its solve time is
zeroed, because neither is observable before the student answers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numcore
from .numcore import Param

MS_PER_DAY = 24 * 3600 * 1000
TDIFF_CAP_MS = 3 * MS_PER_DAY          # 259_200_000
ELAPSED_CAP_MS = 300_000               # per-question solve-time cap

PAD_TOKEN = 0
CORRECT_WRONG = 1
CORRECT_RIGHT = 2
CORRECT_UNKNOWN = 3                    # query position: label not yet observable
N_CORRECT_TOKENS = 4
N_PART_TOKENS = 8                      # parts 1..7 plus pad


class DataError(ValueError):
    """Malformed input data (non-chronological rows, unknown ids, ...)."""


@dataclass
class Interaction:
    """One student-question event in log order."""

    user_id: int
    question_id: int
    part: int
    timestamp_ms: int
    answered_correctly: int
    prior_elapsed_ms: Optional[int] = None


# ---------------------------------------------------------------------------
# Per-user feature transforms
# ---------------------------------------------------------------------------


def transform_elapsed(prior_elapsed: Sequence[Optional[int]]) -> np.ndarray:
    """Shift the prior-question solve times one step left.

    The source log records, on each row, the time spent on the *previous*
    question; the model wants the time spent on the *current* one. That is
    the next row's value, so current[k] = prior[k+1]. The final position and
    any missing value get the 0 sentinel.
    """
    n = len(prior_elapsed)
    out = np.zeros(n, dtype=np.float64)
    for k in range(n - 1):
        v = prior_elapsed[k + 1]
        out[k] = 0.0 if v is None else float(v)
    return out


def compute_tdiff(timestamps: Sequence[int], user_id: Optional[int] = None) -> np.ndarray:
    """Gaps between consecutive timestamps, capped at three days; gap[0] = 0."""
    t = np.asarray(timestamps, dtype=np.int64)
    out = np.zeros(len(t), dtype=np.float64)
    if len(t) > 1:
        d = t[1:] - t[:-1]
        if (d < 0).any():
            i = int(np.argmax(d < 0)) + 1
            who = "unknown user" if user_id is None else f"user {user_id}"
            raise DataError(f"{who}: timestamp decreases at index {i}")
        out[1:] = np.minimum(d, TDIFF_CAP_MS)
    return out


def normalize_continuous(elapsed_ms, tdiff_ms):
    """Scale both continuous channels into [0, 1]; elapsed saturates at its cap."""
    elapsed_norm = np.minimum(np.asarray(elapsed_ms, dtype=np.float64), ELAPSED_CAP_MS) / ELAPSED_CAP_MS
    tdiff_norm = np.asarray(tdiff_ms, dtype=np.float64) / TDIFF_CAP_MS
    return elapsed_norm, tdiff_norm


@dataclass
class UserFeatures:
    """Transformed feature arrays over one user's full history."""

    question_id: np.ndarray   # raw ids, 0-based
    part: np.ndarray          # 1..7
    correct: np.ndarray       # 0/1
    elapsed_norm: np.ndarray
    tdiff_norm: np.ndarray


def user_feature_arrays(history: Sequence[Interaction], user_id: Optional[int] = None) -> UserFeatures:
    if not history:
        raise ValueError("empty interaction history")
    if user_id is None:
        user_id = history[0].user_id
    elapsed = transform_elapsed([h.prior_elapsed_ms for h in history])
    tdiff = compute_tdiff([h.timestamp_ms for h in history], user_id=user_id)
    elapsed_norm, tdiff_norm = normalize_continuous(elapsed, tdiff)
    return UserFeatures(
        question_id=np.asarray([h.question_id for h in history], dtype=np.int64),
        part=np.asarray([h.part for h in history], dtype=np.int64),
        correct=np.asarray([h.answered_correctly for h in history], dtype=np.int64),
        elapsed_norm=elapsed_norm,
        tdiff_norm=tdiff_norm,
    )


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


@dataclass
class FeatureWindow:
    """Fixed-length model input predicting its final position's correctness.

    Padding occupies a contiguous prefix (pad_mask True); the final position
    is always real, carries the UNKNOWN correctness token and a zeroed
    solve-time channel, and its actual outcome is `label`.
    """

    question_id: np.ndarray   # (L,) tokens: 0 pad, real id + 1
    part: np.ndarray          # (L,) tokens: 0 pad, 1..7
    correctness: np.ndarray   # (L,) tokens: 0 pad, 1 wrong, 2 right, 3 unknown
    elapsed_norm: np.ndarray  # (L,) in [0, 1]
    tdiff_norm: np.ndarray    # (L,) in [0, 1]
    pad_mask: np.ndarray      # (L,) bool, True = padding
    label: int
    user_id: int = -1
    end_index: int = -1       # position in the user's full history


def window_from_features(
    feats: UserFeatures, end_index: int, length: int, user_id: int = -1
) -> FeatureWindow:
    n = len(feats.question_id)
    if not 0 <= end_index < n:
        raise ValueError(f"end_index {end_index} outside history of length {n}")
    start = max(0, end_index - length + 1)
    count = end_index - start + 1
    pad = length - count

    qid = np.zeros(length, dtype=np.int64)
    part = np.zeros(length, dtype=np.int64)
    corr = np.zeros(length, dtype=np.int64)
    elapsed = np.zeros(length, dtype=np.float64)
    tdiff = np.zeros(length, dtype=np.float64)
    mask = np.zeros(length, dtype=bool)

    sl = slice(start, end_index + 1)
    qid[pad:] = feats.question_id[sl] + 1
    part[pad:] = feats.part[sl]
    corr[pad:] = feats.correct[sl] + 1
    corr[-1] = CORRECT_UNKNOWN
    elapsed[pad:] = feats.elapsed_norm[sl]
    elapsed[-1] = 0.0
    tdiff[pad:] = feats.tdiff_norm[sl]
    mask[:pad] = True

    return FeatureWindow(
        question_id=qid, part=part, correctness=corr,
        elapsed_norm=elapsed, tdiff_norm=tdiff, pad_mask=mask,
        label=int(feats.correct[end_index]), user_id=user_id, end_index=end_index,
    )


def build_window(history: Sequence[Interaction], end_index: int, length: int) -> FeatureWindow:
    """Window over the min(L, end_index+1) most recent events ending at end_index."""
    feats = user_feature_arrays(history)
    return window_from_features(feats, end_index, length, user_id=history[0].user_id)


def window_end_indices(n_events: int, stride: int) -> list[int]:
    """End positions n-1, n-1-stride, ... down to 0, returned ascending."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ends = list(range(n_events - 1, -1, -stride))
    ends.reverse()
    return ends


def build_user_windows(
    history: Sequence[Interaction], length: int, stride: int, user_id: Optional[int] = None
) -> list[FeatureWindow]:
    """All stride-spaced windows over one user's history (ends ascending)."""
    if user_id is None:
        user_id = history[0].user_id
    feats = user_feature_arrays(history, user_id=user_id)
    return [
        window_from_features(feats, end, length, user_id=user_id)
        for end in window_end_indices(len(history), stride)
    ]


# ---------------------------------------------------------------------------
# Embedding and merge
# ---------------------------------------------------------------------------


@dataclass
class EmbedParams:
    """Per-feature embeddings plus the merge network.

    Categorical channels are table lookups (row 0 = pad). Each continuous
    channel is a one-scalar linear map: scalar * weight_row + bias_row. The
    five d_e-vectors are concatenated and merged by a relu hidden layer of
    width d followed by a linear layer to d.
    """

    question_table: Param
    part_table: Param
    correct_table: Param
    elapsed_w: Param
    elapsed_b: Param
    tdiff_w: Param
    tdiff_b: Param
    merge_w1: Param
    merge_b1: Param
    merge_w2: Param
    merge_b2: Param

    @classmethod
    def init(cls, n_questions: int, d_e: int, d: int, rng: np.random.Generator) -> "EmbedParams":
        xu = numcore.xavier_uniform
        return cls(
            question_table=Param("embed.question_table", xu(n_questions + 1, d_e, rng)),
            part_table=Param("embed.part_table", xu(N_PART_TOKENS, d_e, rng)),
            correct_table=Param("embed.correct_table", xu(N_CORRECT_TOKENS, d_e, rng)),
            elapsed_w=Param("embed.elapsed_w", xu(1, d_e, rng)),
            elapsed_b=Param("embed.elapsed_b", numcore.zeros(1, d_e)),
            tdiff_w=Param("embed.tdiff_w", xu(1, d_e, rng)),
            tdiff_b=Param("embed.tdiff_b", numcore.zeros(1, d_e)),
            merge_w1=Param("embed.merge_w1", xu(5 * d_e, d, rng)),
            merge_b1=Param("embed.merge_b1", numcore.zeros(1, d)),
            merge_w2=Param("embed.merge_w2", xu(d, d, rng)),
            merge_b2=Param("embed.merge_b2", numcore.zeros(1, d)),
        )

    def params(self) -> list[Param]:
        return [
            self.question_table, self.part_table, self.correct_table,
            self.elapsed_w, self.elapsed_b, self.tdiff_w, self.tdiff_b,
            self.merge_w1, self.merge_b1, self.merge_w2, self.merge_b2,
        ]


def embed_window(w: FeatureWindow, p: EmbedParams) -> tuple[np.ndarray, tuple]:
    """Position-wise embed + merge: (L,) features -> (L, d) sequence."""
    n_q = p.question_table.value.shape[0]
    if w.question_id.max() >= n_q:
        raise IndexError(
            f"question token {int(w.question_id.max())} outside table of {n_q} rows"
        )
    eq = p.question_table.value[w.question_id]
    ep = p.part_table.value[w.part]
    ec = p.correct_table.value[w.correctness]
    ee = w.elapsed_norm[:, None] * p.elapsed_w.value + p.elapsed_b.value
    et = w.tdiff_norm[:, None] * p.tdiff_w.value + p.tdiff_b.value
    concat = np.hstack([eq, ep, ec, ee, et])
    h_pre = concat @ p.merge_w1.value + p.merge_b1.value
    h = numcore.relu(h_pre)
    out = h @ p.merge_w2.value + p.merge_b2.value
    return out, (w, concat, h_pre, h)


def embed_window_backward(g: np.ndarray, cache: tuple, p: EmbedParams) -> None:
    """Accumulate dL/d(embed params); nothing upstream of the tokens to return."""
    w, concat, h_pre, h = cache
    p.merge_w2.grad += h.T @ g
    p.merge_b2.grad += g.sum(axis=0, keepdims=True)
    dh = g @ p.merge_w2.value.T
    dpre = numcore.relu_backward(dh, h_pre)
    p.merge_w1.grad += concat.T @ dpre
    p.merge_b1.grad += dpre.sum(axis=0, keepdims=True)
    dconcat = dpre @ p.merge_w1.value.T

    d_e = p.question_table.value.shape[1]
    dq, dp_, dc, de, dt = np.hsplit(dconcat, [d_e, 2 * d_e, 3 * d_e, 4 * d_e])
    np.add.at(p.question_table.grad, w.question_id, dq)
    np.add.at(p.part_table.grad, w.part, dp_)
    np.add.at(p.correct_table.grad, w.correctness, dc)
    p.elapsed_w.grad += (w.elapsed_norm[:, None] * de).sum(axis=0, keepdims=True)
    p.elapsed_b.grad += de.sum(axis=0, keepdims=True)
    p.tdiff_w.grad += (w.tdiff_norm[:, None] * dt).sum(axis=0, keepdims=True)
    p.tdiff_b.grad += dt.sum(axis=0, keepdims=True)
