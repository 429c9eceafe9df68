"""Synthetic corpus generation (latent-skill model) and CSV ingestion."""

import numpy as np
import pytest

from lqkt import training
from lqkt.datagen import (
    SchemaError,
    SynthConfig,
    generate,
    ingest_csv,
    load_questions,
    load_truth,
    oracle_scores,
    write_corpus,
)
from lqkt.features import DataError, TDIFF_CAP_MS


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def test_same_seed_identical_corpora():
    a = generate(SynthConfig(n_users=30, seed=7))
    b = generate(SynthConfig(n_users=30, seed=7))
    assert a.interactions == b.interactions
    assert a.truth == b.truth
    assert [(q.question_id, q.part, q.difficulty) for q in a.questions] == \
           [(q.question_id, q.part, q.difficulty) for q in b.questions]


def test_different_seed_differs():
    a = generate(SynthConfig(n_users=10, seed=1))
    b = generate(SynthConfig(n_users=10, seed=2))
    assert a.interactions != b.interactions


def test_timestamps_strictly_increase_per_user():
    corpus = generate(SynthConfig(n_users=40, seed=3))
    by_user = training.group_by_user(corpus.interactions)
    for uid, h in by_user.items():
        ts = [r.timestamp_ms for r in h]
        assert all(b > a for a, b in zip(ts, ts[1:])), f"user {uid}"


def test_fields_in_valid_ranges():
    cfg = SynthConfig(n_users=40, seed=4)
    corpus = generate(cfg)
    for r in corpus.interactions:
        assert r.answered_correctly in (0, 1)
        assert 1 <= r.part <= 7
        assert 0 <= r.question_id < cfg.n_questions
        assert r.prior_elapsed_ms is None or r.prior_elapsed_ms >= 0
    by_user = training.group_by_user(corpus.interactions)
    for h in by_user.values():
        assert cfg.min_events <= len(h) <= cfg.max_events
        assert h[0].prior_elapsed_ms is None   # nothing before the first question


def test_easy_questions_drift_zero_almost_all_correct():
    # Every difficulty pinned at -10: P(correct) = sigmoid(skill + 10) ~ 1.
    cfg = SynthConfig(n_users=250, min_events=40, max_events=40, drift_sd=0.0,
                      difficulty_mean=-10.0, difficulty_sd=0.0, seed=5)
    corpus = generate(cfg)
    assert all(q.difficulty == -10.0 for q in corpus.questions)
    n = len(corpus.interactions)
    rate = sum(r.answered_correctly for r in corpus.interactions) / n
    assert n >= 10_000
    assert rate >= 0.99


def test_generator_obeys_its_own_truth_probabilities():
    # Events binned by latent probability must show matching empirical rates.
    cfg = SynthConfig(n_users=120, min_events=60, max_events=60,
                      drift_sd=0.0, seed=6)
    corpus = generate(cfg)
    by_user = training.group_by_user(corpus.interactions)
    # group events into high/low truth-probability bins; empirical rates must track
    highs, lows = [], []
    for uid, h in by_user.items():
        for idx, r in enumerate(h):
            p = corpus.truth[(uid, idx)]
            if p >= 0.9:
                highs.append(r.answered_correctly)
            elif p <= 0.1:
                lows.append(r.answered_correctly)
    assert len(highs) >= 200 and len(lows) >= 200
    assert np.mean(highs) >= 0.85
    assert np.mean(lows) <= 0.15


def test_base_rate_in_sanity_band():
    corpus = generate(SynthConfig(n_users=400, drift_sd=0.0, seed=8))
    rate = np.mean([r.answered_correctly for r in corpus.interactions])
    assert 0.4 <= rate <= 0.6


def test_some_gaps_exceed_three_days():
    corpus = generate(SynthConfig(n_users=100, seed=9))
    by_user = training.group_by_user(corpus.interactions)
    big = 0
    for h in by_user.values():
        ts = np.array([r.timestamp_ms for r in h])
        big += int((np.diff(ts) > TDIFF_CAP_MS).sum())
    assert big > 0


def test_oracle_auc_default_config_exceeds_threshold():
    corpus = generate(SynthConfig(n_users=300, seed=10))
    by_user = training.group_by_user(corpus.interactions)
    ws = training.windows_for_users(by_user, list(by_user), 32, 8)
    labels = np.array([w.label for w in ws])
    scores = oracle_scores(corpus.truth, ws)
    assert training.auc(labels, scores) >= 0.75


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        SynthConfig(n_users=0)
    with pytest.raises(ValueError):
        SynthConfig(min_events=10, max_events=5)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def test_write_then_ingest_round_trip(tmp_path):
    corpus = generate(SynthConfig(n_users=25, seed=11))
    paths = write_corpus(corpus, str(tmp_path))
    rows = ingest_csv(paths["interactions"], paths["questions"])
    assert len(rows) == len(corpus.interactions)
    for got, want in zip(rows, corpus.interactions):
        assert got.user_id == want.user_id
        assert got.question_id == want.question_id
        assert got.part == want.part
        assert got.timestamp_ms == want.timestamp_ms
        assert got.answered_correctly == want.answered_correctly
        if want.prior_elapsed_ms is None:
            assert got.prior_elapsed_ms is None
        else:
            assert got.prior_elapsed_ms == pytest.approx(want.prior_elapsed_ms)


def test_write_is_byte_stable(tmp_path):
    corpus = generate(SynthConfig(n_users=15, seed=12))
    p1 = write_corpus(corpus, str(tmp_path / "a"))
    p2 = write_corpus(corpus, str(tmp_path / "b"))
    for key in p1:
        assert open(p1[key], "rb").read() == open(p2[key], "rb").read()


def test_truth_sidecar_round_trip(tmp_path):
    corpus = generate(SynthConfig(n_users=12, seed=13))
    paths = write_corpus(corpus, str(tmp_path))
    truth = load_truth(paths["truth"])
    assert set(truth) == set(corpus.truth)
    for key, val in corpus.truth.items():
        assert truth[key] == pytest.approx(val, abs=1e-12)


def test_lecture_rows_are_filtered(tmp_path):
    inter = tmp_path / "interactions.csv"
    quest = tmp_path / "questions.csv"
    inter.write_text(
        "timestamp,user_id,content_id,content_type_id,answered_correctly,"
        "prior_question_elapsed_time\n"
        "0,1,0,0,1,\n"
        "1000,1,99,1,-1,\n"          # lecture row: dropped, content_id unchecked
        "2000,1,1,0,0,25000.0\n"
    )
    quest.write_text("question_id,part\n0,1\n1,2\n")
    rows = ingest_csv(str(inter), str(quest))
    assert len(rows) == 2
    assert [r.question_id for r in rows] == [0, 1]
    assert rows[0].prior_elapsed_ms is None
    assert rows[1].prior_elapsed_ms == pytest.approx(25000.0)
    assert rows[1].part == 2


def test_missing_column_names_the_column(tmp_path):
    inter = tmp_path / "interactions.csv"
    quest = tmp_path / "questions.csv"
    inter.write_text("timestamp,user_id,content_id,answered_correctly\n")
    quest.write_text("question_id,part\n")
    with pytest.raises(SchemaError, match="content_type_id"):
        ingest_csv(str(inter), str(quest))


def test_unknown_question_id_is_a_data_error(tmp_path):
    inter = tmp_path / "interactions.csv"
    quest = tmp_path / "questions.csv"
    inter.write_text(
        "timestamp,user_id,content_id,content_type_id,answered_correctly,"
        "prior_question_elapsed_time\n"
        "0,1,5,0,1,\n"
    )
    quest.write_text("question_id,part\n0,1\n")
    with pytest.raises(DataError, match="content_id 5"):
        ingest_csv(str(inter), str(quest))


def test_load_questions(tmp_path):
    quest = tmp_path / "questions.csv"
    quest.write_text("question_id,part\n0,3\n1,7\n5,1\n")
    assert load_questions(str(quest)) == {0: 3, 1: 7, 5: 1}


def test_ingest_sorts_by_user_then_time(tmp_path):
    inter = tmp_path / "interactions.csv"
    quest = tmp_path / "questions.csv"
    inter.write_text(
        "timestamp,user_id,content_id,content_type_id,answered_correctly,"
        "prior_question_elapsed_time\n"
        "500,2,0,0,1,\n"
        "100,1,0,0,0,\n"
        "900,1,1,0,1,12000.0\n"
    )
    quest.write_text("question_id,part\n0,1\n1,2\n")
    rows = ingest_csv(str(inter), str(quest))
    assert [(r.user_id, r.timestamp_ms) for r in rows] == [(1, 100), (1, 900), (2, 500)]
