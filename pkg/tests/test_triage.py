import csv
import io
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnntriage.classifier import ShapeError, build_config, init_model
from cnntriage.conglomerate import (
    Ensemble,
    EnsembleSpec,
    TriagePolicy,
    VoteVector,
    classify,
    critical_index,
    tiebreak_score,
    vote,
    weight_schedule,
)
from cnntriage.dataset import BinaryLabel
from cnntriage.triage import TriageRecord, order, parse_report, render_report, score_batch

POLICY = TriagePolicy(3)


def rec(image_id, index, tiebreak=0.5):
    return TriageRecord(image_id, index, tiebreak, classify(index, POLICY))


def random_ensemble(n=5, seed=0):
    cfg = build_config("tiny")
    spec = EnsembleSpec(n=n)
    return Ensemble(spec, [init_model(cfg, seed + k) for k in range(n)], weight_schedule(spec))


class TestOrder:
    def test_by_index(self):
        report = order([rec("a", 10), rec("b", 4), rec("c", 6)], POLICY, timestamp="t")
        assert [r.index for r in report.records] == [10, 6, 4]
        assert [r.rank for r in report.records] == [1, 2, 3]

    def test_tiebreak(self):
        report = order([rec("a", 4, 0.64), rec("b", 4, 0.71)], POLICY, timestamp="t")
        assert [r.tiebreak for r in report.records] == [0.71, 0.64]

    def test_id_fallback(self):
        report = order([rec("b", 4, 0.5), rec("a", 4, 0.5)], POLICY, timestamp="t")
        assert [r.image_id for r in report.records] == ["a", "b"]

    def test_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            order([rec("a", 4), rec("a", 6)], POLICY)

    def test_empty(self):
        with pytest.raises(ValueError):
            order([], POLICY)

    @given(st.lists(st.tuples(st.sampled_from([0.0, 2.0, 4.0, 6.0, 8.0, 10.0]),
                              st.floats(0, 1)), min_size=1, max_size=30),
           st.randoms(use_true_random=False))
    def test_total_and_shuffle_invariant(self, items, rnd):
        records = [rec(f"id{i}", idx, tb) for i, (idx, tb) in enumerate(items)]
        first = order(records, POLICY, timestamp="x")
        shuffled = list(records)
        rnd.shuffle(shuffled)
        second = order(shuffled, POLICY, timestamp="y")
        assert first.body() == second.body()
        assert sorted(r.rank for r in first.records) == list(range(1, len(records) + 1))
        keys = [(r.index, r.tiebreak) for r in first.records]
        assert all(a >= b for a, b in zip(keys, keys[1:]))


class TestScoreBatch:
    def test_single_image_composes(self):
        ens = random_ensemble()
        img = np.random.default_rng(0).uniform(size=(32, 32, 3)).astype(np.float32)
        (r,) = score_batch(ens, [("x", img)], POLICY)
        v = vote(ens, img)
        assert r.index == critical_index(v, 10)
        assert r.tiebreak == pytest.approx(tiebreak_score(v), abs=1e-7)
        assert r.label is classify(r.index, POLICY)

    def test_permutation_independent(self):
        ens = random_ensemble()
        rng = np.random.default_rng(1)
        batch = [(f"i{k}", rng.uniform(size=(32, 32, 3)).astype(np.float32)) for k in range(6)]
        a = score_batch(ens, batch, POLICY)
        b = score_batch(ens, batch[::-1], POLICY)
        assert sorted(a, key=lambda r: r.image_id) == sorted(b, key=lambda r: r.image_id)

    def test_resolution_mismatch_names_image(self):
        ens = random_ensemble()
        batch = [("ok", np.zeros((32, 32, 3), np.float32)), ("bad", np.zeros((16, 16, 3)))]
        with pytest.raises(ShapeError, match="bad"):
            score_batch(ens, batch, POLICY)

    def test_empty(self):
        with pytest.raises(ValueError):
            score_batch(random_ensemble(), [], POLICY)

    def test_critical_like_scores_higher(self, small_ensemble, small_synthetic):
        _, held = small_synthetic
        crit = np.flatnonzero(held.labels == BinaryLabel.CRITICAL)[:5]
        benign = np.flatnonzero(held.labels == BinaryLabel.NONCRITICAL)[:5]
        batch = [(held.ids[i], held.images[i]) for i in np.concatenate([crit, benign])]
        records = {r.image_id: r for r in score_batch(small_ensemble, batch, POLICY)}
        mean_c = np.mean([records[held.ids[i]].index for i in crit])
        mean_nc = np.mean([records[held.ids[i]].index for i in benign])
        assert mean_c > mean_nc

    def test_random_ensemble_keeps_every_record(self):
        ens = random_ensemble(seed=40)
        rng = np.random.default_rng(2)
        batch = [(f"i{k}", rng.uniform(size=(32, 32, 3)).astype(np.float32)) for k in range(10)]
        report = order(score_batch(ens, batch, POLICY), POLICY)
        assert sorted(r.image_id for r in report.records) == sorted(i for i, _ in batch)


class TestRender:
    def report(self, n=1):
        rnd = random.Random(0)
        recs = [rec(f"img{k}", rnd.choice([0, 2, 4, 6, 8, 10]), rnd.random()) for k in range(n)]
        return order(recs, POLICY, ensemble_id="abc", timestamp="2026-01-01T00:00:00+00:00")

    def test_csv_one_row(self):
        rows = list(csv.reader(io.StringIO(render_report(self.report(), "csv").decode())))
        assert rows[0] == ["rank", "image_id", "index", "tiebreak", "label"]
        assert len(rows) == 2

    def test_json_round_trip(self):
        report = self.report(7)
        assert parse_report(render_report(report, "json")) == report

    def test_text_rank_order(self):
        report = self.report(10)
        lines = render_report(report, "text").decode().splitlines()[2:]
        assert [ln.split()[1] for ln in lines] == [r.image_id for r in report.records]
        assert [int(ln.split()[0]) for ln in lines] == list(range(1, 11))

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render_report(self.report(), "xml")

    def test_labels_consistent(self):
        for r in self.report(20).records:
            assert r.label is classify(r.index, POLICY)


def test_vote_vector_to_record_label_text():
    v = VoteVector.from_probs([0.9, 0.9, 0.1, 0.1, 0.1])
    assert classify(critical_index(v, 10), POLICY).text == "critical"
