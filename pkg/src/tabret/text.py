"""Tokenization, corpus statistics and letter-trigram hashing."""

from __future__ import annotations

import math
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

if TYPE_CHECKING:
    from .tables import Corpus

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

STATS_FORMAT = "tabret-stats/1"
DEFAULT_TRIGRAM_DIMS = 16384


def tokenize(text: str | None) -> list[str]:
    """Lower-case and split on anything that is not a letter or digit.

    >>> tokenize("7,115 inactive voters")
    ['7', '115', 'inactive', 'voters']
    """
    if not text:
        return []
    return _TOKEN_RE.findall(text.lower())


@dataclass
class CorpusStats:
    num_docs: int
    doc_freq: dict[str, int]
    avg_doc_len: float
    aspects: tuple[str, ...] = ()
    vocabulary: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_documents(cls, docs: Iterable[Sequence[str]], aspects: Sequence[str] = ()) -> "CorpusStats":
        df: Counter[str] = Counter()
        n = 0
        total = 0
        for doc in docs:
            n += 1
            total += len(doc)
            df.update(set(doc))
        if n == 0:
            raise ValueError("cannot build statistics over an empty corpus")
        vocab = {w: i for i, w in enumerate(sorted(df))}
        return cls(num_docs=n, doc_freq=dict(df), avg_doc_len=total / n, aspects=tuple(aspects), vocabulary=vocab)

    def idf(self, word: str) -> float:
        return idf(self, word)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# {STATS_FORMAT}\n")
            fh.write(f"num_docs\t{self.num_docs}\n")
            fh.write(f"avg_doc_len\t{self.avg_doc_len!r}\n")
            fh.write(f"aspects\t{','.join(self.aspects)}\n")
            for w in sorted(self.doc_freq):
                fh.write(f"{w}\t{self.doc_freq[w]}\n")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusStats":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != f"# {STATS_FORMAT}":
                raise ValueError(f"{path}: unsupported stats format {header!r}")
            num_docs = int(fh.readline().split("\t")[1])
            avg = float(fh.readline().split("\t")[1])
            aspects_field = fh.readline().rstrip("\n").split("\t")[1]
            df = {}
            for line in fh:
                w, c = line.rstrip("\n").split("\t")
                df[w] = int(c)
        vocab = {w: i for i, w in enumerate(sorted(df))}
        aspects = tuple(a for a in aspects_field.split(",") if a)
        return cls(num_docs=num_docs, doc_freq=df, avg_doc_len=avg, aspects=aspects, vocabulary=vocab)


def document_tokens(table, aspects: Sequence[str]) -> list[str]:
    from .tables import aspect_text

    return [tok for a in aspects for tok in aspect_text(table, a)]


def build_stats(corpus: "Corpus", aspects: Sequence[str]) -> CorpusStats:
    if len(corpus) == 0:
        raise ValueError("cannot build statistics over an empty corpus")
    docs = (document_tokens(corpus[tid], aspects) for tid in corpus.ids())
    return CorpusStats.from_documents(docs, aspects)


def idf(stats: CorpusStats, word: str) -> float:
    # smoothed Okapi form; stays positive even when df == num_docs
    df = stats.doc_freq.get(word, 0)
    return math.log(1.0 + (stats.num_docs - df + 0.5) / (df + 0.5))


def trigram_id(trigram: str, dims: int) -> int:
    """Bucket for a letter trigram: CRC-32 of its UTF-8 bytes modulo ``dims``."""
    return zlib.crc32(trigram.encode("utf-8")) % dims


def token_trigrams(token: str) -> list[str]:
    marked = f"#{token}#"
    return [marked[i : i + 3] for i in range(len(marked) - 2)]


def letter_trigrams(tokens: Iterable[str], dims: int = DEFAULT_TRIGRAM_DIMS) -> dict[int, int]:
    """Sparse bag of hashed letter trigrams, summed over tokens."""
    if dims <= 0:
        raise ValueError("dims must be positive")
    counts: Counter[int] = Counter()
    for tok in tokens:
        for tri in token_trigrams(tok):
            counts[trigram_id(tri, dims)] += 1
    return dict(counts)
