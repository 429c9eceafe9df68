"""Synthetic interaction corpus (drifting-skill response model) and CSV ingest.

Each synthetic user has a scalar skill that random-walks over time; the
probability of answering question q correctly is sigmoid(skill - difficulty_q).
The generator writes the exact per-event probabilities to a truth sidecar so
model scores can be compared against the best achievable ranking.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .features import DataError, Interaction


class SchemaError(ValueError):
    """An input file is missing a required column."""


MS_PER_SECOND = 1000


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_questions: int = 120
    min_events: int = 10
    max_events: int = 80
    skill_sd: float = 1.2          # spread of initial user skill
    drift_sd: float = 0.02         # per-event random-walk step of skill
    difficulty_mean: float = 0.0   # shift of question difficulty
    difficulty_sd: float = 0.8     # spread of question difficulty
    gap_mu: float = 11.0           # log-space mean of inter-event gap (ms)
    gap_sigma: float = 3.0         # heavy tail: some gaps exceed days
    elapsed_mu: float = 9.9        # log-space mean of per-question solve time (ms)
    elapsed_sigma: float = 0.5
    missing_elapsed_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError(f"n_users must be >= 1, got {self.n_users}")
        if self.n_questions < 1:
            raise ValueError(f"n_questions must be >= 1, got {self.n_questions}")
        if not (1 <= self.min_events <= self.max_events):
            raise ValueError(
                f"need 1 <= min_events <= max_events, got {self.min_events}, {self.max_events}"
            )


@dataclass
class QuestionMeta:
    question_id: int
    part: int
    difficulty: float


@dataclass
class Corpus:
    interactions: list[Interaction]
    questions: list[QuestionMeta]
    truth: dict[tuple[int, int], float] = field(default_factory=dict)


def generate(cfg: SynthConfig) -> Corpus:
    """Deterministic for a given seed; independent of generation order per user."""
    qrng = np.random.default_rng([cfg.seed, 2**31])
    difficulties = qrng.normal(cfg.difficulty_mean, cfg.difficulty_sd, size=cfg.n_questions)
    parts = qrng.integers(1, 8, size=cfg.n_questions)
    questions = [
        QuestionMeta(q, int(parts[q]), float(difficulties[q]))
        for q in range(cfg.n_questions)
    ]
    interactions: list[Interaction] = []
    truth: dict[tuple[int, int], float] = {}
    for uid in range(cfg.n_users):
        rng = np.random.default_rng([cfg.seed, uid])
        n_events = int(rng.integers(cfg.min_events, cfg.max_events + 1))
        skill = rng.normal(0.0, cfg.skill_sd)
        ts = int(rng.integers(0, 10**9))
        prev_elapsed: float | None = None
        for idx in range(n_events):
            q = int(rng.integers(0, cfg.n_questions))
            p_true = 1.0 / (1.0 + math.exp(-(skill - difficulties[q])))
            correct = int(rng.random() < p_true)
            truth[(uid, idx)] = p_true
            interactions.append(Interaction(
                user_id=uid,
                question_id=q,
                part=questions[q].part,
                timestamp_ms=ts,
                answered_correctly=correct,
                prior_elapsed_ms=prev_elapsed,
            ))
            elapsed = float(rng.lognormal(cfg.elapsed_mu, cfg.elapsed_sigma))
            prev_elapsed = None if rng.random() < cfg.missing_elapsed_rate else round(elapsed)
            ts += int(rng.lognormal(cfg.gap_mu, cfg.gap_sigma)) + 1
            skill += rng.normal(0.0, cfg.drift_sd)
    interactions.sort(key=lambda r: (r.user_id, r.timestamp_ms))
    return Corpus(interactions=interactions, questions=questions, truth=truth)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

INTERACTION_COLUMNS = [
    "timestamp", "user_id", "content_id", "content_type_id",
    "answered_correctly", "prior_question_elapsed_time",
]
QUESTION_COLUMNS = ["question_id", "part"]


def write_corpus(corpus: Corpus, out_dir: str) -> dict[str, str]:
    """interactions.csv + questions.csv + truth.tsv; byte-stable per seed."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "interactions": os.path.join(out_dir, "interactions.csv"),
        "questions": os.path.join(out_dir, "questions.csv"),
        "truth": os.path.join(out_dir, "truth.tsv"),
    }
    with open(paths["interactions"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INTERACTION_COLUMNS)
        for r in corpus.interactions:
            elapsed = "" if r.prior_elapsed_ms is None else f"{r.prior_elapsed_ms:.1f}"
            w.writerow([r.timestamp_ms, r.user_id, r.question_id, 0,
                        r.answered_correctly, elapsed])
    with open(paths["questions"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(QUESTION_COLUMNS)
        for q in corpus.questions:
            w.writerow([q.question_id, q.part])
    with open(paths["truth"], "w") as fh:
        fh.write("user_id\tevent_index\tp_true\n")
        per_user: dict[int, int] = {}
        for r in corpus.interactions:
            idx = per_user.get(r.user_id, 0)
            per_user[r.user_id] = idx + 1
            fh.write(f"{r.user_id}\t{idx}\t{corpus.truth[(r.user_id, idx)]:.12f}\n")
    return paths


def _require_columns(fieldnames: list[str] | None, required: list[str], path: str) -> None:
    have = set(fieldnames or [])
    missing = [c for c in required if c not in have]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")


def load_questions(questions_path: str) -> dict[int, int]:
    """question_id -> part."""
    part_by_qid: dict[int, int] = {}
    with open(questions_path, newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, QUESTION_COLUMNS, questions_path)
        for row in reader:
            part_by_qid[int(row["question_id"])] = int(row["part"])
    return part_by_qid


def ingest_csv(interactions_path: str, questions_path: str) -> list[Interaction]:
    """Load the two-file corpus; keep question rows only (content_type_id == 0).

    Lecture rows (content_type_id == 1) are dropped. A question event whose
    content_id is absent from the question file is a data error. Empty
    prior_question_elapsed_time cells become None. Rows come back sorted by
    (user, timestamp).
    """
    part_by_qid = load_questions(questions_path)
    rows: list[Interaction] = []
    with open(interactions_path, newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, INTERACTION_COLUMNS, interactions_path)
        for i, row in enumerate(reader):
            if int(row["content_type_id"]) != 0:
                continue
            qid = int(row["content_id"])
            if qid not in part_by_qid:
                raise DataError(
                    f"{interactions_path} row {i + 2}: content_id {qid} "
                    f"not present in {questions_path}"
                )
            cell = row["prior_question_elapsed_time"].strip()
            elapsed = None if cell == "" else float(cell)
            rows.append(Interaction(
                user_id=int(row["user_id"]),
                question_id=qid,
                part=part_by_qid[qid],
                timestamp_ms=int(float(row["timestamp"])),
                answered_correctly=int(row["answered_correctly"]),
                prior_elapsed_ms=elapsed,
            ))
    rows.sort(key=lambda r: (r.user_id, r.timestamp_ms))
    return rows


def load_truth(path: str) -> dict[tuple[int, int], float]:
    truth: dict[tuple[int, int], float] = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        _require_columns(header, ["user_id", "event_index", "p_true"], path)
        for line in fh:
            uid_s, idx_s, p_s = line.rstrip("\n").split("\t")
            truth[(int(uid_s), int(idx_s))] = float(p_s)
    return truth


def oracle_scores(truth: dict[tuple[int, int], float], windows) -> np.ndarray:
    """True per-event probabilities for each window's final event."""
    return np.array([truth[(w.user_id, w.end_index)] for w in windows])
