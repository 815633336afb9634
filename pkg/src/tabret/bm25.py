"""First-stage candidate retrieval: an Okapi BM25 inverted index over table aspects."""

from __future__ import annotations

import gzip
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .tables import Corpus, Query, parse_aspects
from .text import CorpusStats, document_tokens, idf

INDEX_FORMAT = "tabret-bm25/1"

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_TOPK = 50
WQT_ASPECTS = ("headers", "caption")
WTQ_ASPECTS = ("headers", "cells", "caption")


@dataclass
class Bm25Index:
    postings: dict[str, list[tuple[str, int]]]
    doc_len: dict[str, int]
    stats: CorpusStats
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    aspects: tuple[str, ...] = WQT_ASPECTS

    def __post_init__(self):
        if self.k1 < 0:
            raise ValueError("k1 must be non-negative")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must lie in [0, 1]")
        self._idf = {w: idf(self.stats, w) for w in self.postings}
        self._doc_tf: dict[str, dict[str, int]] = {tid: {} for tid in self.doc_len}
        for w, plist in self.postings.items():
            for tid, tf in plist:
                self._doc_tf[tid][w] = tf

    def _term_weight(self, word: str) -> float:
        w = self._idf.get(word)
        return w if w is not None else idf(self.stats, word)

    def _norm(self, table_id: str) -> float:
        avg = self.stats.avg_doc_len
        ratio = self.doc_len[table_id] / avg if avg > 0 else 0.0
        return self.k1 * (1.0 - self.b + self.b * ratio)

    def _tf(self, word: str, table_id: str) -> int:
        return self._doc_tf[table_id].get(word, 0)

    def score(self, query_tokens: Sequence[str], table_id: str) -> float:
        """BM25 of one table, summed over query positions (repeated tokens count again)."""
        if table_id not in self.doc_len:
            raise KeyError(f"table {table_id!r} is not indexed")
        norm = self._norm(table_id)
        total = 0.0
        for tok in query_tokens:
            tf = self._tf(tok, table_id)
            if tf:
                total += self._term_weight(tok) * tf * (self.k1 + 1.0) / (tf + norm)
        return total

    def retrieve(self, query_tokens: Sequence[str], k: int = DEFAULT_TOPK) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        acc: dict[str, float] = {}
        norms: dict[str, float] = {}
        for tok in query_tokens:
            plist = self.postings.get(tok)
            if not plist:
                continue
            w = self._term_weight(tok)
            for tid, tf in plist:
                norm = norms.get(tid)
                if norm is None:
                    norm = norms[tid] = self._norm(tid)
                acc[tid] = acc.get(tid, 0.0) + w * tf * (self.k1 + 1.0) / (tf + norm)
        ranked = sorted(((tid, s) for tid, s in acc.items() if s > 0.0), key=lambda x: (-x[1], x[0]))
        return ranked[:k]

    def save(self, path: str | Path) -> None:
        payload = {
            "format": INDEX_FORMAT,
            "k1": self.k1,
            "b": self.b,
            "aspects": list(self.aspects),
            "num_docs": self.stats.num_docs,
            "avg_doc_len": self.stats.avg_doc_len,
            "doc_len": self.doc_len,
            "postings": {w: [[t, tf] for t, tf in p] for w, p in sorted(self.postings.items())},
        }
        raw = json.dumps(payload, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh, gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
            gz.write(raw)

    @classmethod
    def load(cls, path: str | Path) -> "Bm25Index":
        with gzip.open(path, "rt", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != INDEX_FORMAT:
            raise ValueError(f"{path}: unsupported index format {payload.get('format')!r}")
        postings = {w: [(t, int(tf)) for t, tf in p] for w, p in payload["postings"].items()}
        stats = CorpusStats(
            num_docs=payload["num_docs"],
            doc_freq={w: len(p) for w, p in postings.items()},
            avg_doc_len=payload["avg_doc_len"],
            aspects=tuple(payload["aspects"]),
        )
        return cls(postings, payload["doc_len"], stats, payload["k1"], payload["b"], tuple(payload["aspects"]))


def build_index(corpus: Corpus, aspects=WQT_ASPECTS, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    aspects = parse_aspects(aspects)
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    postings: dict[str, list[tuple[str, int]]] = {}
    doc_len: dict[str, int] = {}
    docs = []
    for tid in corpus.ids():
        toks = document_tokens(corpus[tid], aspects)
        docs.append(toks)
        doc_len[tid] = len(toks)
        for w, tf in Counter(toks).items():
            postings.setdefault(w, []).append((tid, tf))
    # ids were visited in sorted order, so every postings list is already sorted
    stats = CorpusStats.from_documents(docs, aspects)
    return Bm25Index(postings, doc_len, stats, k1, b, aspects)


def bm25_score(index: Bm25Index, query_tokens: Sequence[str], table_id: str) -> float:
    return index.score(query_tokens, table_id)


def retrieve_topk(index: Bm25Index, query: Query | Sequence[str], k: int = DEFAULT_TOPK) -> list[tuple[str, float]]:
    tokens = query.tokens if isinstance(query, Query) else query
    return index.retrieve(tokens, k)
