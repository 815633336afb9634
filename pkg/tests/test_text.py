import math
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_idf
from tabret.tables import Corpus, Table
from tabret.text import (
    CorpusStats,
    build_stats,
    idf,
    letter_trigrams,
    token_trigrams,
    tokenize,
    trigram_id,
)


@pytest.mark.parametrize("text,expected", [
    ("Major cities of Netherlands", ["major", "cities", "of", "netherlands"]),
    ("list of flights london to berlin", ["list", "of", "flights", "london", "to", "berlin"]),
    ("7,115 inactive voters", ["7", "115", "inactive", "voters"]),
    ("", []),
    (None, []),
    ("--- !!", []),
    ("snake_case word", ["snake", "case", "word"]),
])
def test_tokenize(text, expected):
    assert tokenize(text) == expected


@given(st.text())
def test_tokenize_idempotent(text):
    toks = tokenize(text)
    assert tokenize(" ".join(toks)) == toks


def _corpus(*cells_per_table):
    return Corpus.from_tables(Table(f"t{i}", ("h",), tuple((c,) for c in cells), f"cap{i}")
                              for i, cells in enumerate(cells_per_table))


class TestStats:
    def test_doc_freq_presence(self):
        stats = build_stats(_corpus(["city city"], ["city"]), ["cells"])
        assert stats.doc_freq["city"] == 2

    def test_avg_len(self):
        stats = build_stats(_corpus(["a b c d"], ["a b c d e f"]), ["cells"])
        assert stats.avg_doc_len == 5.0

    def test_aspect_config_excludes_cells(self):
        stats = build_stats(_corpus(["zebra"], ["yak"]), ["caption", "headers"])
        assert "zebra" not in stats.doc_freq
        assert stats.doc_freq["h"] == 2

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_stats(Corpus.from_tables([]), ["cells"])

    def test_df_bounds(self):
        stats = build_stats(_corpus(["a b"], ["b c"], ["c"]), ["cells", "caption"])
        assert all(0 < v <= stats.num_docs for v in stats.doc_freq.values())

    def test_save_load(self, tmp_path):
        stats = build_stats(_corpus(["a b"], ["b c"]), ["cells"])
        stats.save(tmp_path / "s.tsv")
        loaded = CorpusStats.load(tmp_path / "s.tsv")
        assert (loaded.num_docs, loaded.doc_freq, loaded.avg_doc_len, loaded.aspects) == \
               (stats.num_docs, stats.doc_freq, stats.avg_doc_len, stats.aspects)


class TestIdf:
    def test_half_split(self):
        stats = CorpusStats(2, {"w": 1}, 1.0)
        assert idf(stats, "w") == pytest.approx(math.log(2))

    def test_everywhere_positive(self):
        for n in (1, 5, 1000):
            assert idf(CorpusStats(n, {"w": n}, 1.0), "w") > 0

    def test_unseen(self):
        assert idf(CorpusStats(100, {}, 1.0), "nope") == pytest.approx(math.log(202.0), abs=1e-12)

    @given(st.integers(1, 500), st.data())
    def test_monotone_in_df(self, n, data):
        a = data.draw(st.integers(0, n))
        b = data.draw(st.integers(0, n))
        lo, hi = sorted((a, b))
        assert brute_idf(n, lo) >= brute_idf(n, hi)
        s = CorpusStats(n, {"lo": lo, "hi": hi}, 1.0)
        assert idf(s, "lo") >= idf(s, "hi")


class TestTrigrams:
    def test_cat(self):
        assert token_trigrams("cat") == ["#ca", "cat", "at#"]
        v = letter_trigrams(["cat"], 16384)
        assert v == dict(Counter(trigram_id(t, 16384) for t in ["#ca", "cat", "at#"]))
        assert len(v) == 3

    def test_single_letter(self):
        assert token_trigrams("a") == ["#a#"]
        assert sum(letter_trigrams(["a"]).values()) == 1

    def test_doubling(self):
        once = letter_trigrams(["table"])
        assert letter_trigrams(["table", "table"]) == {k: 2 * v for k, v in once.items()}

    def test_empty(self):
        assert letter_trigrams([]) == {}

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            letter_trigrams(["a"], 0)

    @given(st.lists(st.text("abcxyz", min_size=1), max_size=5), st.lists(st.text("abcxyz", min_size=1), max_size=5),
           st.integers(1, 64))
    def test_additive(self, x, y, dims):
        joint = Counter(letter_trigrams(x, dims))
        joint_expected = Counter(letter_trigrams(x, dims)) + Counter(letter_trigrams(y, dims))
        assert Counter(letter_trigrams(x + y, dims)) == joint_expected
        assert all(0 <= k < dims and c > 0 for k, c in joint.items())
