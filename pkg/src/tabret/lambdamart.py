"""LambdaMART: boosted regression trees fitted to MAP-weighted lambda gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

FOREST_FORMAT = "tabret-forest/1"


class SchemaError(ValueError):
    pass


@dataclass
class RegressionTree:
    """Array-backed binary tree; ``left[i] == -1`` marks node ``i`` as a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    @classmethod
    def leaf(cls, value: float) -> "RegressionTree":
        return cls([-1], [0.0], [-1], [-1], [float(value)])

    def _add(self) -> int:
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1), (self.value, 0.0)):
            lst.append(v)
        return len(self.value) - 1

    @property
    def n_leaves(self) -> int:
        return sum(1 for l in self.left if l == -1)

    def leaf_index(self, x: Sequence[float]) -> int:
        node = 0
        while self.left[node] != -1:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return node

    def predict_one(self, x: Sequence[float]) -> float:
        return self.value[self.leaf_index(x)]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id for every row of X."""
        out = np.zeros(X.shape[0], dtype=np.int64)
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if self.left[node] == -1:
                out[idx] = node
                continue
            go_left = X[idx, self.feature[node]] <= self.threshold[node]
            stack.append((self.left[node], idx[go_left]))
            stack.append((self.right[node], idx[~go_left]))
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.value, dtype=np.float64)[self.apply(X)]


@dataclass
class Forest:
    feature_names: list[str]
    trees: list[RegressionTree] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    train_map: list[float] = field(default_factory=list)
    valid_map: list[float] = field(default_factory=list)

    def score(self, features: Sequence[float]) -> float:
        if len(features) != len(self.feature_names):
            raise SchemaError(f"expected {len(self.feature_names)} features, got {len(features)}")
        return float(sum(w * t.predict_one(features) for t, w in zip(self.trees, self.weights)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise SchemaError(f"feature matrix must have {len(self.feature_names)} columns")
        out = np.zeros(X.shape[0])
        for t, w in zip(self.trees, self.weights):
            out += w * t.predict(X)
        return out

    def dumps(self) -> str:
        lines = [f"# {FOREST_FORMAT}", "features\t" + "\t".join(self.feature_names), f"trees\t{len(self.trees)}"]
        for i, (t, w) in enumerate(zip(self.trees, self.weights)):
            lines.append(f"tree\t{i}\tweight\t{w!r}")
            for n in range(len(t.value)):
                if t.left[n] == -1:
                    lines.append(f"node\t{n}\tleaf\t{t.value[n]!r}")
                else:
                    lines.append(f"node\t{n}\tsplit\t{self.feature_names[t.feature[n]]}\t{t.threshold[n]!r}"
                                 f"\t{t.left[n]}\t{t.right[n]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Forest":
        lines = text.splitlines()
        if not lines or lines[0] != f"# {FOREST_FORMAT}":
            raise ValueError("not a forest dump")
        names = lines[1].split("\t")[1:]
        pos = {n: i for i, n in enumerate(names)}
        forest = cls(names)
        tree = None
        for line in lines[3:]:
            parts = line.split("\t")
            if parts[0] == "tree":
                tree = RegressionTree()
                forest.trees.append(tree)
                forest.weights.append(float(parts[3]))
                continue
            n = tree._add()
            if n != int(parts[1]):
                raise ValueError(f"node ids out of order in tree {len(forest.trees) - 1}")
            if parts[2] == "leaf":
                tree.value[n] = float(parts[3])
            else:
                tree.feature[n] = pos[parts[3]]
                tree.threshold[n] = float(parts[4])
                tree.left[n] = int(parts[5])
                tree.right[n] = int(parts[6])
        return forest

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Forest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def score(forest: Forest, features: Sequence[float]) -> float:
    return forest.score(features)


def rank_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score, ties kept in input order."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))


def average_precision_of_labels(ranked_labels: Sequence[int]) -> float:
    rel = np.asarray(ranked_labels, dtype=np.float64)
    n_rel = rel.sum()
    if n_rel == 0:
        return 0.0
    hits = np.cumsum(rel)
    return float((rel * hits / np.arange(1, len(rel) + 1)).sum() / n_rel)


def delta_ap_matrix(ranked_labels: Sequence[int]) -> np.ndarray:
    """|AP change| from swapping ranked positions a and b, for every pair with differing labels.

    Closed form: moving a relevant item from rank a to rank b changes the
    precision terms at a, b and every relevant item strictly between them.
    """
    rel = np.asarray(ranked_labels, dtype=np.float64)
    n = len(rel)
    n_rel = rel.sum()
    out = np.zeros((n, n))
    if n_rel == 0 or n_rel == n:
        return out
    ranks = np.arange(1, n + 1, dtype=np.float64)
    hits = np.cumsum(rel)
    inv = np.cumsum(rel / ranks)  # prefix sum of 1/rank over relevant items
    a, b = np.triu_indices(n, k=1)
    diff = rel[a] != rel[b]
    a, b = a[diff], b[diff]
    between = inv[b - 1] - inv[a]
    down = rel[a] == 1
    delta = np.where(
        down,
        -hits[a] / ranks[a] + hits[b] / ranks[b] - between,
        (hits[a] + 1) / ranks[a] - hits[b] / ranks[b] + between,
    ) / n_rel
    out[a, b] = np.abs(delta)
    out[b, a] = out[a, b]
    return out


def compute_lambdas(scores: Sequence[float], labels: Sequence[int], sigma: float = 1.0,
                    return_weights: bool = False):
    """MAP-weighted LambdaRank gradients (positive = push the item up).

    For each (positive p, negative n) pair with rho = 1 / (1 + exp(sigma (s_p - s_n))),
    lambda = sigma |dAP| rho goes to p and -lambda to n; the matching second-order
    weight sigma^2 |dAP| rho (1 - rho) goes to both.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    lam = np.zeros(len(s))
    w = np.zeros(len(s))
    if y.all() or not y.any():
        return (lam, w) if return_weights else lam
    order = rank_order(s)
    position = np.empty(len(s), dtype=np.int64)
    position[order] = np.arange(len(s))
    dap = delta_ap_matrix(y[order].astype(int))
    pos = np.flatnonzero(y)
    neg = np.flatnonzero(~y)
    delta = dap[position[pos][:, None], position[neg][None, :]]
    rho = 1.0 / (1.0 + np.exp(np.clip(sigma * (s[pos][:, None] - s[neg][None, :]), -500, 500)))
    pair = sigma * delta * rho
    hess = sigma * sigma * delta * rho * (1.0 - rho)
    lam[pos] = pair.sum(axis=1)
    lam[neg] = -pair.sum(axis=0)
    w[pos] = hess.sum(axis=1)
    w[neg] = hess.sum(axis=0)
    return (lam, w) if return_weights else lam


@dataclass
class LambdaMartConfig:
    num_trees: int = 100
    max_leaves: int = 16
    learning_rate: float = 0.1
    min_instances_per_leaf: int = 1
    sigma: float = 1.0
    subsample: float = 1.0  # fraction of query groups per tree, drawn with ``seed``
    seed: int = 0


def _best_split(X: np.ndarray, target: np.ndarray, idx: np.ndarray, min_leaf: int):
    """Greedy variance-reduction split of the instances ``idx``: (gain, feature, threshold) or None."""
    n = len(idx)
    if n < 2 * min_leaf:
        return None
    t = target[idx]
    total = t.sum()
    base = total * total / n
    best = None
    for f in range(X.shape[1]):
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        cum = np.cumsum(t[order])[:-1]
        n_left = np.arange(1, n)
        ok = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not ok.any():
            continue
        gain = cum ** 2 / n_left + (total - cum) ** 2 / (n - n_left) - base
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > 1e-12 and (best is None or gain[k] > best[0]):
            thr = 0.5 * (xs[k] + xs[k + 1])
            if not thr < xs[k + 1]:
                thr = xs[k]
            best = (float(gain[k]), f, float(thr))
    return best


def fit_regression_tree(X: np.ndarray, target: np.ndarray, hess: np.ndarray, max_leaves: int,
                        min_leaf: int = 1) -> RegressionTree:
    """Leaf-wise least-squares tree on ``target``; leaves hold the Newton step sum(target) / sum(hess)."""
    tree = RegressionTree()
    root = tree._add()
    leaves = {root: np.arange(X.shape[0])}
    candidates = {root: _best_split(X, target, leaves[root], min_leaf)}
    while len(leaves) < max_leaves:
        live = [(c[0], node) for node, c in candidates.items() if c is not None]
        if not live:
            break
        gain, node = max(live, key=lambda gn: (gn[0], -gn[1]))
        _, f, thr = candidates.pop(node)
        idx = leaves.pop(node)
        go_left = X[idx, f] <= thr
        l, r = tree._add(), tree._add()
        tree.feature[node], tree.threshold[node], tree.left[node], tree.right[node] = f, thr, l, r
        for child, sub in ((l, idx[go_left]), (r, idx[~go_left])):
            leaves[child] = sub
            candidates[child] = _best_split(X, target, sub, min_leaf)
    for node, idx in leaves.items():
        h = hess[idx].sum()
        tree.value[node] = float(target[idx].sum() / h) if h > 1e-12 else 0.0
    return tree


def mean_average_precision(groups: Sequence[tuple[np.ndarray, np.ndarray]], scores: Sequence[np.ndarray]) -> float:
    aps = [average_precision_of_labels(np.asarray(y)[rank_order(s)]) for (_, y), s in zip(groups, scores)]
    return float(np.mean(aps)) if aps else 0.0


def fit_lambdamart(train: Sequence[tuple[np.ndarray, np.ndarray]], config: LambdaMartConfig | None = None,
                   feature_names: Sequence[str] | None = None,
                   valid: Sequence[tuple[np.ndarray, np.ndarray]] | None = None) -> Forest:
    """Boost ``config.num_trees`` trees over query groups of (features, binary labels).

    Per-iteration training MAP lands in ``forest.train_map`` (entry 0 is the
    empty model) and, when ``valid`` is given, validation MAP in ``forest.valid_map``.
    """
    cfg = config or LambdaMartConfig()
    groups = [(np.asarray(X, dtype=np.float64), np.asarray(y).astype(int)) for X, y in train]
    groups = [(X, y) for X, y in groups if len(y)]
    if not groups or not any(0 < y.sum() < len(y) for _, y in groups):
        raise ValueError("training set needs at least one query group with mixed labels")
    k = groups[0][0].shape[1]
    if any(X.shape[1] != k for X, _ in groups):
        raise SchemaError("all query groups must share one feature width")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(k)]
    if len(names) != k:
        raise SchemaError("feature_names length differs from the feature width")
    forest = Forest(names)
    X_all = np.vstack([X for X, _ in groups])
    bounds = np.cumsum([0] + [len(y) for _, y in groups])
    scores = np.zeros(len(X_all))
    valid_groups = [(np.asarray(X, dtype=np.float64), np.asarray(y).astype(int)) for X, y in (valid or [])]
    valid_scores = [np.zeros(len(y)) for _, y in valid_groups]

    def split(s):
        return [s[bounds[i] : bounds[i + 1]] for i in range(len(groups))]

    forest.train_map.append(mean_average_precision(groups, split(scores)))
    if valid_groups:
        forest.valid_map.append(mean_average_precision(valid_groups, valid_scores))
    rng = np.random.default_rng(cfg.seed)
    for it in range(cfg.num_trees):
        lam = np.zeros(len(X_all))
        hess = np.zeros(len(X_all))
        for gi, (_, y) in enumerate(groups):
            sl = slice(bounds[gi], bounds[gi + 1])
            lam[sl], hess[sl] = compute_lambdas(scores[sl], y, cfg.sigma, return_weights=True)
        rows = np.arange(len(X_all))
        if cfg.subsample < 1.0:
            keep = rng.random(len(groups)) < cfg.subsample
            rows = np.concatenate([np.arange(bounds[g], bounds[g + 1]) for g in np.flatnonzero(keep)] or [rows])
        tree = fit_regression_tree(X_all[rows], lam[rows], hess[rows], cfg.max_leaves, cfg.min_instances_per_leaf)
        forest.trees.append(tree)
        forest.weights.append(cfg.learning_rate)
        scores += cfg.learning_rate * tree.predict(X_all)
        forest.train_map.append(mean_average_precision(groups, split(scores)))
        if valid_groups:
            valid_scores = [s + cfg.learning_rate * tree.predict(X) for s, (X, _) in zip(valid_scores, valid_groups)]
            forest.valid_map.append(mean_average_precision(valid_groups, valid_scores))
        logger.debug("tree %d train MAP %.4f", it + 1, forest.train_map[-1])
    return forest


def rank_candidates(forest: Forest, candidates: Sequence[tuple[str, Sequence[float]]]) -> list[tuple[str, float]]:
    """Score (table_id, features) pairs; descending score, ties by ascending table id."""
    scored = [(tid, forest.score(f)) for tid, f in candidates]
    return sorted(scored, key=lambda x: (-x[1], x[0]))
