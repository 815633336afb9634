import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabret.bm25 import build_index
from tabret.evaluation import (
    RankedResult,
    average_precision,
    candidate_recall,
    evaluate,
    is_filtered,
    length_bucket_report,
    pr_curve,
    split_dataset,
)
from tabret.tables import Corpus, Query, Table


def rr(ids, relevant, qid="q", scores=None):
    scores = scores or [float(len(ids) - i) for i in range(len(ids))]
    return RankedResult(qid, list(zip(ids, scores)), frozenset(relevant))


def oracle_ap(ranked, relevant):
    precisions = []
    for k in range(1, len(ranked) + 1):
        if ranked[k - 1] in relevant:
            precisions.append(sum(1 for t in ranked[:k] if t in relevant) / k)
    return sum(precisions) / len(relevant)


class TestAveragePrecision:
    def test_rank_one(self):
        assert average_precision(rr(["a", "b"], {"a"})) == 1.0

    def test_rank_two(self):
        assert average_precision(rr(["b", "a"], {"a"})) == 0.5

    def test_ranks_one_and_three(self):
        assert average_precision(rr(["a", "x", "b"], {"a", "b"})) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)

    def test_missing_relevant_counts(self):
        assert average_precision(rr(["a", "x"], {"a", "zz"})) == 0.5

    def test_no_relevant(self):
        with pytest.raises(ValueError):
            average_precision(rr(["a"], set()))

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            rr(["a", "a"], {"a"})


class TestEvaluate:
    def test_all_solved(self):
        rep = evaluate([rr(["a", "b"], {"a"}), rr(["c", "d"], {"c"}, "q2")])
        assert rep.map == rep.p_at_1 == 1.0

    def test_missed_candidate_filtered(self):
        rep = evaluate([rr(["a", "b"], {"a"}), rr(["c", "d"], {"zz"}, "q2")])
        assert (rep.num_queries_filtered, rep.num_queries_evaluated, rep.map) == (1, 1, 1.0)

    def test_single_candidate_filtered(self):
        results = [rr(["a"], {"a"}), rr(["b", "a"], {"a"}, "q2")]
        assert is_filtered(results[0])
        rep = evaluate(results)
        assert rep.map == 0.5 and rep.total == 2
        assert evaluate(results, filter_rule=False).map == 0.75

    def test_mean(self):
        rep = evaluate([rr(["a", "b"], {"a"}), rr(["b", "a"], {"a"}, "q2")])
        assert rep.map == 0.75 and rep.p_at_1 == 0.5

    def test_all_filtered(self):
        rep = evaluate([rr(["a"], {"a"})])
        assert rep.undefined and rep.map is None and rep.num_queries_evaluated == 0


@settings(max_examples=200)
@given(st.lists(st.tuples(st.permutations(list("abcdefghij")), st.integers(1, 10),
                          st.sets(st.sampled_from("abcdefghijk"), min_size=1, max_size=3)), min_size=1, max_size=5))
def test_map_matches_oracle(cases):
    results = [rr(list(perm[:n]), rel, f"q{i}") for i, (perm, n, rel) in enumerate(cases)]
    rep = evaluate(results, filter_rule=False)
    expected = sum(oracle_ap(list(p[:n]), r) for p, n, r in cases) / len(cases)
    assert abs(rep.map - expected) < 1e-12


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8, unique=True), st.integers(0, 7))
def test_rank_metrics_invariant_to_monotone_transform(scores, rel_index):
    ids = [f"t{i}" for i in range(len(scores))]
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    rel = {ids[rel_index % len(ids)]}
    a = rr([ids[i] for i in order], rel, scores=[scores[i] for i in order])
    b = rr([ids[i] for i in order], rel, scores=[3 * scores[i] + 7 for i in order])
    assert average_precision(a) == average_precision(b)
    assert evaluate([a]).p_at_1 == evaluate([b]).p_at_1


class TestPrCurve:
    results = [rr(["a", "b"], {"a"}, "q1", [0.9, 0.1]), rr(["c", "d"], {"d"}, "q2", [0.5, 0.4]),
               rr(["e", "f"], {"e"}, "q3", [0.3, 0.2])]

    def test_low_threshold(self):
        (_, p, r), = pr_curve(self.results, [0.0])
        assert r == pytest.approx(2 / 3) and p == pytest.approx(2 / 3)

    def test_high_threshold(self):
        (_, p, r), = pr_curve(self.results, [1.0])
        assert (p, r) == (None, 0.0)

    def test_descending_rejected(self):
        with pytest.raises(ValueError):
            pr_curve(self.results, [0.5, 0.1])

    @given(st.lists(st.floats(-1, 2), min_size=1, max_size=12))
    def test_recall_non_increasing(self, ths):
        pts = pr_curve(self.results, sorted(ths))
        assert all(b[2] <= a[2] for a, b in zip(pts, pts[1:]))


class TestBuckets:
    def test_single_bucket(self):
        results = [rr(["a", "b"], {"a"}, f"q{i}") for i in range(5)]
        assert length_bucket_report(results, [3] * 5) == {"3": 1.0}

    def test_tail_and_no_empty(self):
        results = [rr(["a", "b"], {"a"}, f"q{i}") for i in range(6)] + [rr(["b", "a"], {"a"}, "z")]
        out = length_bucket_report(results, [2] * 6 + [9])
        assert out == {"2": 1.0, "tail": 0.0}
        assert length_bucket_report([], {}) == {}


class TestSplit:
    def test_sizes(self):
        tr, va, te = split_dataset(list(range(10)), (0.7, 0.1, 0.2), seed=1)
        assert (len(tr), len(va), len(te)) == (7, 1, 2)

    def test_seeded(self):
        assert split_dataset(list(range(30)), seed=5) == split_dataset(list(range(30)), seed=5)

    @given(st.integers(0, 200), st.integers(0, 1000))
    def test_partition(self, n, seed):
        parts = split_dataset(list(range(n)), seed=seed)
        joined = [x for p in parts for x in p]
        assert sorted(joined) == list(range(n))

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_dataset([1, 2], (0.5, 0.5, 0.5))


class TestCandidateRecall:
    corpus = Corpus.from_tables(Table(f"t{i}", ("h",), (("x",),), f"unique{i} list") for i in range(6))
    index = build_index(corpus, ["caption", "headers"])

    def test_unique_caption_token(self):
        qs = [Query.from_text(f"q{i}", f"unique{i}", [f"t{i}"]) for i in range(6)]
        assert candidate_recall(self.index, qs, 1) == 1.0

    def test_zero_score_never_recalled(self):
        qs = [Query.from_text("q0", "unique0", ["t0"]), Query.from_text("q1", "nothing", ["t1"])]
        assert candidate_recall(self.index, qs, len(self.corpus)) == 0.5

    def test_bad_k(self):
        with pytest.raises(ValueError):
            candidate_recall(self.index, [], 0)
