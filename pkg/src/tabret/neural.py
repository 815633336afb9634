"""Neural query/table matching.

A bi-directional GRU encodes the query.  Headers, cells, rows and columns are
treated as unordered memories read by soft attention (NN1); the caption gets
its own bi-GRU and is matched by concatenation (NN2).  One independent
``AspectModel`` is trained per aspect with a 2-way softmax and negative
log-likelihood.  Forward and backward passes are plain float64 numpy.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .cdssm import _write_deterministic_npz
from .tables import Query, Table
from .text import tokenize

logger = logging.getLogger(__name__)

MODEL_FORMAT = "tabret-aspect-model/1"
MEMORY_ASPECTS = ("header", "cell", "row", "column")
NEURAL_ASPECTS = MEMORY_ASPECTS + ("caption",)
UNK = "<unk>"
GATES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


@dataclass
class GruParams:
    Wz: np.ndarray
    Uz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    bh: np.ndarray

    def __post_init__(self):
        h, d = self.Wz.shape
        for name in ("Wz", "Wr", "Wh"):
            if getattr(self, name).shape != (h, d):
                raise ValueError(f"{name} must be ({h}, {d})")
        for name in ("Uz", "Ur", "Uh"):
            if getattr(self, name).shape != (h, h):
                raise ValueError(f"{name} must be ({h}, {h})")
        for name in ("bz", "br", "bh"):
            if getattr(self, name).shape != (h,):
                raise ValueError(f"{name} must be ({h},)")

    @property
    def hidden(self) -> int:
        return self.Wz.shape[0]

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator, scale: float = 0.08) -> "GruParams":
        u = lambda *shape: rng.uniform(-scale, scale, shape)
        return cls(Wz=u(h, d), Uz=u(h, h), Wr=u(h, d), Ur=u(h, h), Wh=u(h, d), Uh=u(h, h),
                   bz=np.zeros(h), br=np.zeros(h), bh=np.zeros(h))

    @classmethod
    def zeros(cls, d: int, h: int) -> "GruParams":
        return cls(*(np.zeros((h, d)) if n[0] == "W" else np.zeros((h, h)) for n in ("Wz", "Uz", "Wr", "Ur", "Wh", "Uh")),
                   bz=np.zeros(h), br=np.zeros(h), bh=np.zeros(h))


def gru_step(params: GruParams, e_i: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    if e_i.shape != (params.Wz.shape[1],) or h_prev.shape != (params.hidden,):
        raise ValueError("input or state dimension does not match GRU parameters")
    return _gru_step(params, e_i, h_prev)[0]


def _gru_step(p: GruParams, e, h):
    z = sigmoid(p.Wz @ e + p.Uz @ h + p.bz)
    r = sigmoid(p.Wr @ e + p.Ur @ h + p.br)
    rh = r * h
    ht = np.tanh(p.Wh @ e + p.Uh @ rh + p.bh)
    return z * ht + (1.0 - z) * h, (e, h, z, r, rh, ht)


def _gru_run(p: GruParams, xs: np.ndarray):
    h = np.zeros(p.hidden)
    caches = []
    for e in xs:
        h, c = _gru_step(p, e, h)
        caches.append(c)
    return h, caches


def _gru_backprop(p: GruParams, caches, dh: np.ndarray, g: dict, prefix: str) -> np.ndarray:
    """Backprop through a run given the gradient on its last state; returns input gradients."""
    dxs = np.zeros((len(caches), p.Wz.shape[1]))
    for t in range(len(caches) - 1, -1, -1):
        e, h, z, r, rh, ht = caches[t]
        dz = dh * (ht - h)
        dht = dh * z
        dh_prev = dh * (1.0 - z)
        da_h = dht * (1.0 - ht ** 2)
        g[prefix + "Wh"] += np.outer(da_h, e)
        g[prefix + "Uh"] += np.outer(da_h, rh)
        g[prefix + "bh"] += da_h
        d_rh = p.Uh.T @ da_h
        dr = d_rh * h
        dh_prev += d_rh * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        g[prefix + "Wz"] += np.outer(da_z, e)
        g[prefix + "Uz"] += np.outer(da_z, h)
        g[prefix + "bz"] += da_z
        g[prefix + "Wr"] += np.outer(da_r, e)
        g[prefix + "Ur"] += np.outer(da_r, h)
        g[prefix + "br"] += da_r
        dh_prev += p.Uz.T @ da_z + p.Ur.T @ da_r
        dxs[t] = p.Wh.T @ da_h + p.Wz.T @ da_z + p.Wr.T @ da_r
        dh = dh_prev
    return dxs


@dataclass
class AttentionParams:
    W: np.ndarray  # (d_mem + d_query,)
    b: np.ndarray  # shape (1,)


def attention_read(memory: np.ndarray, v_q: np.ndarray, params: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-of-tanh weights over memory rows and the weighted read vector."""
    memory = np.asarray(memory, dtype=np.float64)
    if memory.ndim != 2 or memory.shape[0] == 0:
        raise ValueError("attention needs a non-empty memory")
    d = memory.shape[1]
    if params.W.shape != (d + v_q.shape[0],):
        raise ValueError("attention weight width must equal memory dim + query dim")
    s = np.tanh(memory @ params.W[:d] + params.W[d:] @ v_q + params.b[0])
    alpha = softmax(s)
    return alpha, alpha @ memory


@dataclass
class TableMemories:
    M_h: np.ndarray
    M_cel: np.ndarray
    M_row: np.ndarray
    M_col: np.ndarray


@dataclass
class _Mix:
    """A memory as rows of averaged embeddings: M = weights @ emb[ids]."""

    ids: np.ndarray
    weights: np.ndarray


def _bag(tokens: Sequence[str], vocab: dict[str, int]) -> dict[int, float]:
    ids = [vocab[t] for t in tokens if t in vocab]
    out: dict[int, float] = {}
    for i in ids:
        out[i] = out.get(i, 0.0) + 1.0 / len(ids)
    return out


def _mix(bags: list[dict[int, float]]) -> _Mix:
    ids = sorted({i for b in bags for i in b})
    col = {i: k for k, i in enumerate(ids)}
    w = np.zeros((len(bags), len(ids)))
    for r, b in enumerate(bags):
        for i, v in b.items():
            w[r, col[i]] = v
    return _Mix(np.array(ids, dtype=np.int64), w)


def memory_plans(table: Table, vocab: dict[str, int]) -> dict[str, _Mix]:
    header_bags = [_bag(tokenize(h), vocab) for h in table.headers]
    cell_bags = [[_bag(tokenize(c), vocab) for c in row] for row in table.cells]
    flat = [b for row in cell_bags for b in row]
    cel = _mix(flat)
    n_r, n_c = table.n_rows, table.n_cols
    cell_w = cel.weights.reshape(n_r, n_c, -1)
    # rows / columns: uniform average over their cell vectors
    row_w = cell_w.mean(axis=1)
    col_w = cell_w.mean(axis=0)
    return {
        "header": _mix(header_bags),
        "cell": cel,
        "row": _Mix(cel.ids, row_w),
        "column": _Mix(cel.ids, col_w),
    }


def build_memories(table: Table, embeddings) -> TableMemories:
    """Header/cell vectors are mean word embeddings (OOV skipped, empty -> 0); rows/columns average cells."""
    plans = memory_plans(table, embeddings.words)
    emb = embeddings.vectors
    m = {k: v.weights @ emb[v.ids] for k, v in plans.items()}
    return TableMemories(M_h=m["header"], M_cel=m["cell"], M_row=m["row"], M_col=m["column"])


@dataclass
class NeuralConfig:
    embed_dim: int = 64
    hidden: int = 64
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 20
    negatives: int = 4
    seed: int = 0
    init_scale: float = 0.08


class AspectModel:
    """Parameters for one aspect: embeddings, query bi-GRU, attention or caption bi-GRU, output layer."""

    def __init__(self, aspect: str, vocab: Sequence[str], embed_dim: int = 64, hidden: int = 64,
                 seed: int = 0, init_scale: float = 0.08, pretrained=None):
        if aspect not in NEURAL_ASPECTS:
            raise ValueError(f"unknown neural aspect {aspect!r}")
        words = [UNK] + sorted(set(vocab) - {UNK})
        self.aspect = aspect
        self.vocab = {w: i for i, w in enumerate(words)}
        rng = np.random.default_rng(seed)
        d, h = embed_dim, hidden
        self.emb = rng.uniform(-init_scale, init_scale, (len(words), d))
        if pretrained is not None:
            if pretrained.dim != d:
                raise ValueError(f"pretrained embeddings have dim {pretrained.dim}, model expects {d}")
            for w, i in self.vocab.items():
                v = pretrained.get(w)
                if v is not None:
                    self.emb[i] = v
        self.q_fwd = GruParams.init(d, h, rng, init_scale)
        self.q_bwd = GruParams.init(d, h, rng, init_scale)
        self.cap_fwd = self.cap_bwd = self.att = None
        if aspect == "caption":
            self.cap_fwd = GruParams.init(d, h, rng, init_scale)
            self.cap_bwd = GruParams.init(d, h, rng, init_scale)
            width = 4 * h
        else:
            self.att = AttentionParams(rng.uniform(-init_scale, init_scale, d + 2 * h), np.zeros(1))
            width = 2 * h + d
        self.out_W = rng.uniform(-init_scale, init_scale, (2, width))
        self.out_b = np.zeros(2)
        self.loss_trace: list[float] = []

    @property
    def embed_dim(self) -> int:
        return self.emb.shape[1]

    @property
    def hidden(self) -> int:
        return self.q_fwd.hidden

    def tensors(self) -> dict[str, np.ndarray]:
        t = {"emb": self.emb}
        grus = [("q_fwd", self.q_fwd), ("q_bwd", self.q_bwd)]
        if self.aspect == "caption":
            grus += [("cap_fwd", self.cap_fwd), ("cap_bwd", self.cap_bwd)]
        for name, g in grus:
            for gate in GATES:
                t[f"{name}.{gate}"] = getattr(g, gate)
        if self.att is not None:
            t["att.W"] = self.att.W
            t["att.b"] = self.att.b
        t["out.W"] = self.out_W
        t["out.b"] = self.out_b
        return t

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.vocab.get(t, 0) for t in tokens], dtype=np.int64)

    # -- examples -------------------------------------------------------
    def prepare(self, query_tokens: Sequence[str], table: Table):
        """Pre-tokenised form of a (query, table) pair; None for the aspect side if it is empty."""
        q = self.token_ids(query_tokens)
        if self.aspect == "caption":
            cap = tokenize(table.caption) if table.caption else []
            return q, (self.token_ids(cap) if cap else None)
        plan = memory_plans(table, self.vocab)[self.aspect]
        has_text = (any(tokenize(h) for h in table.headers) if self.aspect == "header"
                    else any(tokenize(c) for row in table.cells for c in row))
        return q, (plan if has_text else None)

    # -- forward / backward ----------------------------------------------
    def _encode(self, fwd: GruParams, bwd: GruParams, ids: np.ndarray):
        xs = self.emb[ids]
        hf, cf = _gru_run(fwd, xs)
        hb, cb = _gru_run(bwd, xs[::-1])
        return np.concatenate([hf, hb]), (ids, cf, cb)

    def _encode_back(self, fwd, bwd, trace, dv, g, pf, pb):
        ids, cf, cb = trace
        h = fwd.hidden
        dx = _gru_backprop(fwd, cf, dv[:h], g, pf)
        dx += _gru_backprop(bwd, cb, dv[h:], g, pb)[::-1]
        np.add.at(g["emb"], ids, dx)

    def _forward(self, prepared):
        q_ids, side = prepared
        if len(q_ids) == 0:
            raise ValueError("query has no tokens")
        v_q, q_trace = self._encode(self.q_fwd, self.q_bwd, q_ids)
        if self.aspect == "caption":
            v_c, c_trace = self._encode(self.cap_fwd, self.cap_bwd, side)
            x = np.concatenate([v_q, v_c])
            extra = c_trace
        else:
            mem = side.weights @ self.emb[side.ids]
            alpha, read = attention_read(mem, v_q, self.att)
            x = np.concatenate([v_q, read])
            extra = (mem, alpha)
        prob = softmax(self.out_W @ x + self.out_b)
        return prob, (v_q, q_trace, x, extra)

    def score_prepared(self, prepared) -> float:
        if prepared[1] is None:
            return 0.0
        return float(self._forward(prepared)[0][0])

    def score(self, query_tokens: Sequence[str], table: Table) -> float:
        return self.score_prepared(self.prepare(query_tokens, table))

    def _loss_grad_one(self, prepared, label: int, g: dict, scale: float) -> float:
        prob, (v_q, q_trace, x, extra) = self._forward(prepared)
        target = 0 if label else 1
        loss = -np.log(max(prob[target], 1e-300))
        dlogit = prob.copy()
        dlogit[target] -= 1.0
        dlogit *= scale
        g["out.W"] += np.outer(dlogit, x)
        g["out.b"] += dlogit
        dx = self.out_W.T @ dlogit
        n = v_q.shape[0]
        dv_q = dx[:n].copy()
        if self.aspect == "caption":
            self._encode_back(self.cap_fwd, self.cap_bwd, extra, dx[n:], g, "cap_fwd.", "cap_bwd.")
        else:
            mem, alpha = extra
            plan = prepared[1]
            d = mem.shape[1]
            d_read = dx[n:]
            d_mem = np.outer(alpha, d_read)
            d_alpha = mem @ d_read
            s = np.tanh(mem @ self.att.W[:d] + self.att.W[d:] @ v_q + self.att.b[0])
            ds = alpha * (d_alpha - alpha @ d_alpha)
            du = ds * (1.0 - s ** 2)
            g["att.W"][:d] += du @ mem
            g["att.W"][d:] += du.sum() * v_q
            g["att.b"] += du.sum()
            d_mem += np.outer(du, self.att.W[:d])
            dv_q += du.sum() * self.att.W[d:]
            np.add.at(g["emb"], plan.ids, plan.weights.T @ d_mem)
        self._encode_back(self.q_fwd, self.q_bwd, q_trace, dv_q, g, "q_fwd.", "q_bwd.")
        return float(loss)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors().items()}

    def loss_and_grads(self, batch: Sequence[tuple[object, int]]) -> tuple[float, dict[str, np.ndarray]]:
        """Mean NLL over prepared (example, label) pairs with the gradient of every tensor."""
        g = self.zero_grads()
        usable = [(p, y) for p, y in batch if p[1] is not None]
        if not usable:
            return 0.0, g
        scale = 1.0 / len(usable)
        total = sum(self._loss_grad_one(p, y, g, scale) for p, y in usable)
        return total * scale, g

    def loss(self, batch: Sequence[tuple[object, int]]) -> float:
        usable = [(p, y) for p, y in batch if p[1] is not None]
        if not usable:
            return 0.0
        total = 0.0
        for p, y in usable:
            prob = self._forward(p)[0]
            total += -np.log(max(prob[0 if y else 1], 1e-300))
        return total / len(usable)

    # -- persistence -----------------------------------------------------
    def save(self, path: str | Path) -> None:
        tensors = self.tensors()
        words = sorted(self.vocab, key=self.vocab.get)
        manifest = {
            "format": MODEL_FORMAT,
            "aspect": self.aspect,
            "embed_dim": self.embed_dim,
            "hidden": self.hidden,
            "vocab": words,
            "shapes": {k: list(v.shape) for k, v in tensors.items()},
            "loss_trace": self.loss_trace,
        }
        buf = io.BytesIO()
        np.savez(buf, manifest=np.array(json.dumps(manifest, sort_keys=True)), **tensors)
        _write_deterministic_npz(path, buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "AspectModel":
        with np.load(path, allow_pickle=False) as z:
            manifest = json.loads(str(z["manifest"]))
            if manifest.get("format") != MODEL_FORMAT:
                raise ValueError(f"{path}: unsupported model format {manifest.get('format')!r}")
            arrays = {k: z[k] for k in manifest["shapes"]}
        model = cls(manifest["aspect"], manifest["vocab"], manifest["embed_dim"], manifest["hidden"])
        if [w for w, _ in sorted(model.vocab.items(), key=lambda kv: kv[1])] != manifest["vocab"]:
            raise ValueError(f"{path}: vocabulary order mismatch")
        for k, t in model.tensors().items():
            if t.shape != arrays[k].shape:
                raise ValueError(f"{path}: tensor {k} has shape {arrays[k].shape}, expected {t.shape}")
            t[...] = arrays[k]
        model.loss_trace = list(manifest.get("loss_trace", []))
        return model


def encode_query(model: AspectModel, tokens: Sequence[str]) -> np.ndarray:
    if not tokens:
        raise ValueError("cannot encode an empty query")
    return model._encode(model.q_fwd, model.q_bwd, model.token_ids(tokens))[0]


def nn1_score(memory: np.ndarray, v_q: np.ndarray, model: AspectModel) -> float:
    memory = np.asarray(memory, dtype=np.float64)
    if memory.size == 0:
        return 0.0
    _, read = attention_read(memory, v_q, model.att)
    return float(softmax(model.out_W @ np.concatenate([v_q, read]) + model.out_b)[0])


def nn2_caption_score(caption_tokens: Sequence[str], query_tokens: Sequence[str], model: AspectModel) -> float:
    if not caption_tokens:
        return 0.0
    v_q = encode_query(model, query_tokens)
    v_c = model._encode(model.cap_fwd, model.cap_bwd, model.token_ids(caption_tokens))[0]
    return float(softmax(model.out_W @ np.concatenate([v_q, v_c]) + model.out_b)[0])


def neural_feature_names() -> list[str]:
    return [f"nn.{a}" for a in NEURAL_ASPECTS]


def neural_feature_vector(query: Query, table: Table, models: dict[str, AspectModel]) -> list[float]:
    """Scores in the order header, cell, row, column, caption."""
    missing = [a for a in NEURAL_ASPECTS if a not in models]
    if missing:
        raise KeyError(f"no neural model for aspect(s) {', '.join(missing)}")
    if not query.tokens:
        return [0.0] * len(NEURAL_ASPECTS)
    return [models[a].score(query.tokens, table) for a in NEURAL_ASPECTS]


def train_aspect_model(data: Sequence[tuple[Sequence[str] | Query, Table, int]], aspect: str,
                       config: NeuralConfig | None = None, vocab: Iterable[str] | None = None,
                       pretrained=None) -> AspectModel:
    """Mini-batch SGD on the 2-way NLL; the per-epoch mean loss is kept in ``model.loss_trace``."""
    cfg = config or NeuralConfig()
    labels = {int(bool(y)) for _, _, y in data}
    if labels != {0, 1}:
        raise ValueError("training data needs both positive and negative pairs")
    rows = [((q.tokens if isinstance(q, Query) else tuple(q)), t, int(bool(y))) for q, t, y in data]
    if vocab is None:
        vocab = _vocab_from(rows)
    rng = np.random.default_rng(cfg.seed)
    model = AspectModel(aspect, vocab, cfg.embed_dim, cfg.hidden, seed=int(rng.integers(2**31)),
                        init_scale=cfg.init_scale, pretrained=pretrained)
    prepared = [(model.prepare(q, t), y) for q, t, y in rows if q]
    prepared = [(p, y) for p, y in prepared if p[1] is not None]
    if not prepared:
        raise ValueError(f"no usable training pairs for aspect {aspect!r}")
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prepared))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [prepared[i] for i in order[start : start + cfg.batch_size]]
            loss, grads = model.loss_and_grads(batch)
            total += loss * len(batch)
            for name, tensor in model.tensors().items():
                tensor -= cfg.learning_rate * grads[name]
        trace.append(total / len(prepared))
        logger.info("aspect %s epoch %d loss %.4f", aspect, epoch + 1, trace[-1])
    model.loss_trace = trace
    return model


def _vocab_from(rows) -> list[str]:
    words = set()
    for q, t, _ in rows:
        words.update(q)
        words.update(tok for h in t.headers for tok in tokenize(h))
        words.update(tok for row in t.cells for c in row for tok in tokenize(c))
        words.update(tokenize(t.caption))
    return sorted(words)


def gradient_check(model: AspectModel, examples: Sequence[tuple[object, int]], epsilon: float = 1e-5,
                   coords_per_tensor: int = 32, seed: int = 0,
                   corrupt: Callable[[dict[str, np.ndarray]], None] | None = None,
                   per_tensor: dict[str, float] | None = None) -> float:
    """Largest |analytic - central difference| / max(|analytic|, |numeric|, 1e-8) over sampled coordinates.

    ``examples`` are prepared pairs as produced by ``AspectModel.prepare``.  ``corrupt``
    may tamper with the analytic gradients (negative controls).  When
    ``per_tensor`` is a dict it receives the worst error of each tensor.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, grads = model.loss_and_grads(examples)
    if corrupt is not None:
        corrupt(grads)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, tensor in model.tensors().items():
        flat = tensor.reshape(-1)
        if name == "emb":
            # coordinates of embedding rows the examples actually touch
            touched = np.flatnonzero(np.any(grads["emb"] != 0, axis=1))
            pool = (touched[:, None] * tensor.shape[1] + np.arange(tensor.shape[1])).reshape(-1)
        else:
            pool = np.arange(flat.size)
        if pool.size > coords_per_tensor:
            pool = rng.choice(pool, size=coords_per_tensor, replace=False)
        g_flat = grads[name].reshape(-1)
        err_t = 0.0
        for idx in pool:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = model.loss(examples)
            flat[idx] = orig - epsilon
            down = model.loss(examples)
            flat[idx] = orig
            num = (up - down) / (2.0 * epsilon)
            ana = g_flat[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            err_t = max(err_t, err)
        if per_tensor is not None:
            per_tensor[name] = err_t
        worst = max(worst, err_t)
    return worst
