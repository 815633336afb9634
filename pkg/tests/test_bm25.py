import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import WORDS, brute_idf, random_corpus
from tabret.bm25 import Bm25Index, bm25_score, build_index, retrieve_topk
from tabret.tables import Corpus, Query, Table
from tabret.text import document_tokens


def oracle_scores(corpus, aspects, query_tokens, k1=1.2, b=0.75):
    """Exhaustive scan straight from the definition."""
    docs = {tid: document_tokens(corpus[tid], aspects) for tid in corpus.ids()}
    n = len(docs)
    avg = sum(len(d) for d in docs.values()) / n
    df = Counter(w for d in docs.values() for w in set(d))
    out = {}
    for tid, d in docs.items():
        tf = Counter(d)
        s = 0.0
        for x in query_tokens:
            if tf[x]:
                s += brute_idf(n, df[x]) * tf[x] * (k1 + 1) / (tf[x] + k1 * (1 - b + b * len(d) / avg))
        out[tid] = s
    return out


def oracle_topk(scores, k):
    return sorted(((t, s) for t, s in scores.items() if s > 0), key=lambda x: (-x[1], x[0]))[:k]


def _one(tid, cells, caption=None):
    return Table(tid, ("h",), tuple((c,) for c in cells), caption)


def test_postings_and_doc_len():
    idx = build_index(Corpus.from_tables([Table("t", ("a",), (("b a",),))]), ["headers", "cells"])
    assert idx.postings == {"a": [("t", 2)], "b": [("t", 1)]}
    assert idx.doc_len == {"t": 3}


def test_no_overlap_scores_zero():
    idx = build_index(Corpus.from_tables([_one("t", ["x y"])]), ["cells"])
    assert bm25_score(idx, ["q"], "t") == 0.0


def test_length_ratio_one_gives_idf():
    idx = build_index(Corpus.from_tables([_one("t", ["x y"])]), ["cells"])
    assert bm25_score(idx, ["x"], "t") == pytest.approx(brute_idf(1, 1), abs=1e-15)


def test_duplicate_query_token_doubles():
    idx = build_index(random_corpus(30, seed=1), ["headers", "cells", "caption"])
    for tid in idx.doc_len:
        assert bm25_score(idx, ["river", "river"], tid) == pytest.approx(2 * bm25_score(idx, ["river"], tid))


def test_unknown_table():
    idx = build_index(Corpus.from_tables([_one("t", ["x"])]), ["cells"])
    with pytest.raises(KeyError):
        bm25_score(idx, ["x"], "zzz")


def test_bad_hyperparameters():
    corpus = Corpus.from_tables([_one("t", ["x"])])
    with pytest.raises(ValueError):
        build_index(corpus, ["cells"], k1=-1)
    with pytest.raises(ValueError):
        build_index(corpus, ["cells"], b=1.5)
    with pytest.raises(ValueError):
        build_index(Corpus.from_tables([]), ["cells"])


def test_k_larger_than_matches():
    corpus = Corpus.from_tables([_one("a", ["x"]), _one("b", ["y"]), _one("c", ["x z"])])
    got = retrieve_topk(build_index(corpus, ["cells"]), Query.from_text("q", "x"), 10)
    assert [t for t, _ in got] == ["a", "c"]


def test_ties_by_table_id():
    corpus = Corpus.from_tables([_one("b", ["x"]), _one("a", ["x"]), _one("c", ["y"])])
    got = retrieve_topk(build_index(corpus, ["cells"]), ["x"], 5)
    assert [t for t, _ in got] == ["a", "b"]
    assert got[0][1] == got[1][1]


def test_k_must_be_positive():
    idx = build_index(Corpus.from_tables([_one("a", ["x"])]), ["cells"])
    with pytest.raises(ValueError):
        idx.retrieve(["x"], 0)


def test_configurations():
    corpus = random_corpus(5)
    assert build_index(corpus, ["caption", "headers"]).aspects == ("headers", "caption")
    assert build_index(corpus, ["caption", "headers", "cells"]).aspects == ("headers", "cells", "caption")


def test_random_corpus_matches_oracle():
    corpus = random_corpus(200, seed=7)
    aspects = ("headers", "cells", "caption")
    idx = build_index(corpus, aspects)
    rng = random.Random(11)
    for _ in range(30):
        q = [rng.choice(WORDS) for _ in range(rng.randint(1, 5))]
        want = oracle_topk(oracle_scores(corpus, aspects, q), 50)
        got = idx.retrieve(q, 50)
        assert [t for t, _ in got] == [t for t, _ in want]
        assert max((abs(a[1] - b[1]) for a, b in zip(got, want)), default=0) < 1e-9


def test_postings_sum_to_doc_len():
    idx = build_index(random_corpus(50, seed=2), ["headers", "cells", "caption"])
    totals = Counter()
    for plist in idx.postings.values():
        assert [t for t, _ in plist] == sorted(t for t, _ in plist)
        for tid, tf in plist:
            totals[tid] += tf
    assert all(totals[t] == n for t, n in idx.doc_len.items())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.sampled_from(WORDS), min_size=1, max_size=5), st.integers(1, 30))
def test_prefix_and_nonnegative(seed, q, k):
    idx = build_index(random_corpus(40, seed=seed), ["headers", "caption"])
    a, b = idx.retrieve(q, k), idx.retrieve(q, k + 1)
    assert b[: len(a)] == a
    assert all(s > 0 for _, s in b)
    assert all(bm25_score(idx, q, t) >= 0 for t in idx.doc_len)


def test_save_load_roundtrip(tmp_path):
    idx = build_index(random_corpus(60, seed=4), ["headers", "cells"])
    idx.save(tmp_path / "i.json.gz")
    back = Bm25Index.load(tmp_path / "i.json.gz")
    for q in (["river", "city"], ["alpha"], ["nothing"]):
        assert back.retrieve(q, 20) == idx.retrieve(q, 20)
