"""Designed query/aspect matching features at word, phrase and sentence level."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .tables import ASPECTS, Query, Table, aspect_text
from .text import CorpusStats, idf

if TYPE_CHECKING:
    from .cdssm import SubwordEncoderParams

DESIGNED_NAMES = ("wmt", "wmq", "pp", "s1", "s2")
DEFAULT_MAX_NGRAM = 3


class ConfigurationError(RuntimeError):
    pass


@dataclass
class PhraseTable:
    """Source phrase -> [(target, p(tgt|src), p(src|tgt))]; phrases are space-joined tokens."""

    entries: dict[str, list[tuple[str, float, float]]] = field(default_factory=dict)
    max_phrase_len: int = 0

    def __post_init__(self):
        self._by_target: dict[str, dict[str, float]] = defaultdict(dict)
        for src, targets in self.entries.items():
            for tgt, p_ts, p_st in targets:
                self._register(src, tgt, p_ts, p_st)

    def _register(self, src, tgt, p_ts, p_st):
        if not src or not tgt:
            raise ValueError("phrases must be non-empty")
        if not (0.0 <= p_ts <= 1.0 and 0.0 <= p_st <= 1.0):
            raise ValueError(f"probabilities out of range for {src!r} ||| {tgt!r}")
        self._by_target[tgt][src] = p_st
        self.max_phrase_len = max(self.max_phrase_len, len(src.split()))

    def add(self, src: str, tgt: str, p_tgt_given_src: float, p_src_given_tgt: float) -> None:
        self.entries.setdefault(src, []).append((tgt, p_tgt_given_src, p_src_given_tgt))
        self._register(src, tgt, p_tgt_given_src, p_src_given_tgt)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def targets(self, src: str) -> list[tuple[str, float, float]]:
        return self.entries.get(src, [])

    def p_src_given_tgt(self, src: str, tgt: str) -> float:
        return self._by_target.get(tgt, {}).get(src, 0.0)

    def with_identity(self, phrases) -> "PhraseTable":
        """Copy with ``src -> src`` entries (both probabilities 1.0) for the given phrases."""
        pt = PhraseTable({k: list(v) for k, v in self.entries.items()})
        for p in sorted(set(phrases)):
            if p not in {t for t, _, _ in pt.targets(p)}:
                pt.add(p, p, 1.0, 1.0)
        return pt

    @classmethod
    def load(cls, path: str | Path) -> "PhraseTable":
        pt = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = [p.strip() for p in line.split("|||")]
                if len(parts) < 3:
                    raise ValueError(f"{path}:{lineno}: expected 'src ||| tgt ||| p p'")
                probs = parts[2].split()
                if len(probs) < 2:
                    raise ValueError(f"{path}:{lineno}: expected two probabilities")
                pt.add(parts[0], parts[1], float(probs[0]), float(probs[1]))
        return pt

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for src in sorted(self.entries):
                for tgt, p_ts, p_st in self.entries[src]:
                    fh.write(f"{src} ||| {tgt} ||| {p_ts!r} {p_st!r}\n")


@dataclass
class EmbeddingTable:
    words: dict[str, int]
    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] == 0:
            raise ValueError("embedding matrix must be 2-D with d > 0")
        if len(self.words) != self.vectors.shape[0]:
            raise ValueError("word index and matrix disagree in size")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, word: str) -> bool:
        return word in self.words

    def get(self, word: str):
        i = self.words.get(word)
        return None if i is None else self.vectors[i]

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        words: dict[str, int] = {}
        rows = []
        dim = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip().split(" ")
                if not parts or not parts[0]:
                    continue
                if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    dim = int(parts[1])
                    continue
                vec = [float(x) for x in parts[1:]]
                if dim is None:
                    dim = len(vec)
                if len(vec) != dim:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
                if parts[0] in words:
                    continue
                words[parts[0]] = len(rows)
                rows.append(vec)
        if dim is None:
            raise ValueError(f"{path}: no embeddings found")
        return cls(words, np.asarray(rows, dtype=np.float64).reshape(len(rows), dim))

    def save(self, path: str | Path) -> None:
        inv = sorted(self.words.items(), key=lambda kv: kv[1])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(inv)} {self.dim}\n")
            for w, i in inv:
                fh.write(w + " " + " ".join(f"{x:.6f}" for x in self.vectors[i]) + "\n")


def word_overlap(aspect_tokens: Sequence[str], query_tokens: Sequence[str], stats: CorpusStats,
                 direction: str = "toward-table") -> float:
    """IDF-weighted share of aspect word types that also occur in the query.

    ``toward-table`` normalises by the aspect's IDF mass (f_wmt), ``toward-query``
    by the query's (f_wmq).
    """
    a_types = set(aspect_tokens)
    q_types = set(query_tokens)
    # sorted: float sums must not depend on per-process string hashing
    shared = sum(idf(stats, w) for w in sorted(a_types & q_types))
    if direction == "toward-table":
        denom = sum(idf(stats, w) for w in sorted(a_types))
    elif direction == "toward-query":
        denom = sum(idf(stats, w) for w in sorted(q_types))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return shared / denom if denom > 0 else 0.0


def paraphrase_pair_score(src_x: str | Sequence[str], src_y: str | Sequence[str], pt: PhraseTable) -> float:
    x = src_x if isinstance(src_x, str) else " ".join(src_x)
    y = src_y if isinstance(src_y, str) else " ".join(src_y)
    return sum(p_ts * pt.p_src_given_tgt(y, tgt) for tgt, p_ts, _ in pt.targets(x))


def _ngrams(tokens: Sequence[str], n: int) -> list[str]:
    return [" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def f_pp(aspect_tokens: Sequence[str], query_tokens: Sequence[str], pt: PhraseTable,
         max_n: int = DEFAULT_MAX_NGRAM) -> float:
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    total = 0.0
    for n in range(1, max_n + 1):
        a_grams = _ngrams(aspect_tokens, n)
        q_grams = _ngrams(query_tokens, n)
        if not a_grams or not q_grams:
            continue
        # Q(tgt) = sum_j p(y_j|tgt), so the double sum over (i, j) is one pass per side
        q_mass: dict[str, float] = defaultdict(float)
        for y in q_grams:
            for tgt, _, p_st in pt.targets(y):
                q_mass[tgt] += p_st
        if not q_mass:
            continue
        pair_sum = 0.0
        for x in a_grams:
            for tgt, p_ts, _ in pt.targets(x):
                pair_sum += p_ts * q_mass.get(tgt, 0.0)
        total += pair_sum / len(a_grams)
    return total / max_n


def _avg_vector(tokens: Sequence[str], emb: EmbeddingTable):
    idx = [emb.words[t] for t in tokens if t in emb.words]
    if not idx:
        return None
    return emb.vectors[idx].mean(axis=0)


def cosine(u: np.ndarray | None, v: np.ndarray | None) -> float:
    if u is None or v is None:
        return 0.0
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def avg_embedding_similarity(aspect_tokens: Sequence[str], query_tokens: Sequence[str], emb: EmbeddingTable) -> float:
    return cosine(_avg_vector(aspect_tokens, emb), _avg_vector(query_tokens, emb))


@dataclass
class FeatureResources:
    stats: CorpusStats | None = None
    phrase_table: PhraseTable | None = None
    embeddings: EmbeddingTable | None = None
    encoder: "SubwordEncoderParams | None" = None
    max_ngram: int = DEFAULT_MAX_NGRAM

    def require(self) -> None:
        for name in ("stats", "phrase_table", "embeddings", "encoder"):
            if getattr(self, name) is None:
                raise ConfigurationError(f"designed features need resource {name!r}")


def designed_feature_names(aspects: Sequence[str] = ASPECTS) -> list[str]:
    return [f"{a}.{f}" for a in aspects for f in DESIGNED_NAMES]


def aspect_scores(aspect_tokens: Sequence[str], query_tokens: Sequence[str], res: FeatureResources,
                  query_vec=None) -> list[float]:
    from .cdssm import subword_encode

    if not aspect_tokens or not query_tokens:
        return [0.0] * len(DESIGNED_NAMES)
    if query_vec is None:
        query_vec = subword_encode(query_tokens, res.encoder)
    return [
        word_overlap(aspect_tokens, query_tokens, res.stats, "toward-table"),
        word_overlap(aspect_tokens, query_tokens, res.stats, "toward-query"),
        f_pp(aspect_tokens, query_tokens, res.phrase_table, res.max_ngram),
        cosine(subword_encode(aspect_tokens, res.encoder), query_vec),
        avg_embedding_similarity(aspect_tokens, query_tokens, res.embeddings),
    ]


def designed_feature_vector(query: Query, table: Table, res: FeatureResources,
                            aspects: Sequence[str] = ASPECTS) -> list[float]:
    """Five scores per aspect, ordered (headers, cells, caption) x (wmt, wmq, pp, s1, s2)."""
    from .cdssm import subword_encode

    res.require()
    qvec = subword_encode(query.tokens, res.encoder) if query.tokens else None
    out: list[float] = []
    for a in aspects:
        out.extend(aspect_scores(aspect_text(table, a), query.tokens, res, qvec))
    if not all(math.isfinite(v) for v in out):
        raise FloatingPointError(f"non-finite designed feature for query {query.id} / table {table.id}")
    return out
