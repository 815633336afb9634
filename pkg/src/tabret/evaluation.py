"""Ranking metrics and the evaluation protocol (filtering, PR thresholds, length buckets, splits)."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class RankedResult:
    query_id: str
    candidates: list[tuple[str, float]]
    relevant: frozenset[str]

    def __post_init__(self):
        self.relevant = frozenset(self.relevant)
        ids = [c for c, _ in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError(f"query {self.query_id}: duplicate candidates")

    @property
    def top(self) -> tuple[str, float] | None:
        return self.candidates[0] if self.candidates else None

    def top_correct(self) -> bool:
        return bool(self.candidates) and self.candidates[0][0] in self.relevant


@dataclass
class EvalReport:
    map: float | None
    p_at_1: float | None
    num_queries_evaluated: int
    num_queries_filtered: int
    per_bucket_p_at_1: dict[str, float] = field(default_factory=dict)
    pr_points: list[tuple[float, float | None, float]] = field(default_factory=list)
    undefined: bool = False

    @property
    def total(self) -> int:
        return self.num_queries_evaluated + self.num_queries_filtered

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "p_at_1": self.p_at_1,
            "num_queries_evaluated": self.num_queries_evaluated,
            "num_queries_filtered": self.num_queries_filtered,
            "metrics_undefined": self.undefined,
            "per_bucket_p_at_1": self.per_bucket_p_at_1,
            "pr_points": [{"threshold": t, "precision": p, "recall": r} for t, p, r in self.pr_points],
        }


def average_precision(result: RankedResult) -> float:
    """Mean of precision@rank over relevant items; relevant items never retrieved count as 0."""
    if not result.relevant:
        raise ValueError(f"query {result.query_id} has no relevant tables")
    hits = 0
    total = 0.0
    for rank, (tid, _) in enumerate(result.candidates, 1):
        if tid in result.relevant:
            hits += 1
            total += hits / rank
    return total / len(result.relevant)


def is_filtered(result: RankedResult) -> bool:
    """The protocol drops queries with a single candidate or no relevant table among candidates."""
    if len(result.candidates) <= 1:
        return True
    return not any(tid in result.relevant for tid, _ in result.candidates)


def evaluate(results: Sequence[RankedResult], filter_rule: bool = True) -> EvalReport:
    kept = [r for r in results if not (filter_rule and is_filtered(r))]
    n_filtered = len(results) - len(kept)
    if not kept:
        return EvalReport(None, None, 0, n_filtered, undefined=True)
    aps = [average_precision(r) for r in kept]
    p1 = sum(r.top_correct() for r in kept) / len(kept)
    return EvalReport(float(np.mean(aps)), p1, len(kept), n_filtered)


def candidate_recall(index, queries, k: int) -> float:
    """Share of labeled queries with a relevant table inside the top-k BM25 candidates."""
    if k < 1:
        raise ValueError("k must be >= 1")
    labeled = [q for q in queries if q.relevant_table_ids]
    if not labeled:
        return 0.0
    found = 0
    for q in labeled:
        ids = {tid for tid, _ in index.retrieve(q.tokens, k)}
        found += bool(ids & set(q.relevant_table_ids))
    return found / len(labeled)


def pr_curve(results: Sequence[RankedResult], thresholds: Sequence[float]) -> list[tuple[float, float | None, float]]:
    """(threshold, precision, recall); precision is None when no query's top score clears the threshold."""
    ths = list(thresholds)
    if any(b < a for a, b in zip(ths, ths[1:])):
        raise ValueError("thresholds must be ascending")
    total = len(results)
    out = []
    for tau in ths:
        answered = [r for r in results if r.candidates and r.candidates[0][1] > tau]
        correct = sum(r.top_correct() for r in answered)
        precision = correct / len(answered) if answered else None
        recall = correct / total if total else 0.0
        out.append((float(tau), precision, recall))
    return out


def default_thresholds(results: Sequence[RankedResult], n: int = 21) -> list[float]:
    tops = [r.candidates[0][1] for r in results if r.candidates]
    if not tops:
        return [0.0]
    lo, hi = min(tops), max(tops)
    span = hi - lo if hi > lo else 1.0
    return [float(x) for x in np.linspace(lo - 0.01 * span, hi, n)]


def length_bucket_report(results: Sequence[RankedResult], lengths: dict[str, int] | Sequence[int],
                         min_count: int = 5) -> dict[str, float]:
    """P@1 per exact query length; lengths seen fewer than ``min_count`` times share a ``tail`` bucket."""
    if not isinstance(lengths, dict):
        lengths = {r.query_id: n for r, n in zip(results, lengths)}
    groups: dict[int, list[RankedResult]] = defaultdict(list)
    for r in results:
        groups[lengths[r.query_id]].append(r)
    out: dict[str, float] = {}
    tail: list[RankedResult] = []
    for n in sorted(groups):
        if len(groups[n]) >= min_count:
            out[str(n)] = sum(r.top_correct() for r in groups[n]) / len(groups[n])
        else:
            tail.extend(groups[n])
    if tail:
        out["tail"] = sum(r.top_correct() for r in tail) / len(tail)
    return out


def split_dataset(items: Sequence, ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0):
    """Seeded train/validation/test split; sizes are floored and the remainder goes to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(items)
    sizes = [math.floor(r * n + 1e-9) for r in ratios]
    sizes[0] += n - sum(sizes)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [items[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def write_pr_csv(path, rows: Sequence[tuple[str, float, float | None, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "threshold", "precision", "recall"])
        for setting, t, p, r in rows:
            w.writerow([setting, f"{t:.6f}", "undefined" if p is None else f"{p:.6f}", f"{r:.6f}"])


def write_bucket_csv(path, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "query_length", "p_at_1"])
        for setting, bucket, p in rows:
            w.writerow([setting, bucket, f"{p:.6f}"])
