"""Convolutional sub-word sentence encoder (CDSSM-style) and its paraphrase training.

Tokens are hashed into letter-trigram buckets, embedded, convolved with a
window of three token positions (tanh), max-pooled over positions and
projected through a tanh layer.  Everything is float64 numpy with a
hand-written backward pass.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .text import DEFAULT_TRIGRAM_DIMS, letter_trigrams, tokenize

logger = logging.getLogger(__name__)

ENCODER_FORMAT = "tabret-cdssm/1"
WINDOW = 3


@dataclass
class SubwordEncoderParams:
    trigram_emb: np.ndarray  # (dims, d_sub)
    conv_w: np.ndarray  # (channels, WINDOW * d_sub)
    conv_b: np.ndarray  # (channels,)
    proj_w: np.ndarray  # (d_out, channels)
    proj_b: np.ndarray  # (d_out,)
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        dims, d_sub = self.trigram_emb.shape
        ch = self.conv_w.shape[0]
        if self.conv_w.shape != (ch, WINDOW * d_sub) or self.conv_b.shape != (ch,):
            raise ValueError("convolution shapes do not match trigram embedding width")
        if self.proj_w.shape[1] != ch or self.proj_b.shape != (self.proj_w.shape[0],):
            raise ValueError("projection shapes do not match convolution channels")

    @property
    def dims(self) -> int:
        return self.trigram_emb.shape[0]

    @property
    def out_dim(self) -> int:
        return self.proj_w.shape[0]

    @classmethod
    def init(cls, dims: int = DEFAULT_TRIGRAM_DIMS, d_sub: int = 32, channels: int = 64, d_out: int = 32,
             seed: int = 0, scale: float = 0.08) -> "SubwordEncoderParams":
        rng = np.random.default_rng(seed)
        return cls(
            trigram_emb=rng.uniform(-scale, scale, (dims, d_sub)),
            conv_w=rng.uniform(-scale, scale, (channels, WINDOW * d_sub)),
            conv_b=np.zeros(channels),
            proj_w=rng.uniform(-scale, scale, (d_out, channels)),
            proj_b=np.zeros(d_out),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {"trigram_emb": self.trigram_emb, "conv_w": self.conv_w, "conv_b": self.conv_b,
                "proj_w": self.proj_w, "proj_b": self.proj_b}

    def save(self, path: str | Path) -> None:
        manifest = {"format": ENCODER_FORMAT, "shapes": {k: list(v.shape) for k, v in self.tensors().items()},
                    "loss_trace": self.loss_trace}
        buf = io.BytesIO()
        np.savez(buf, manifest=np.array(json.dumps(manifest, sort_keys=True)), **self.tensors())
        _write_deterministic_npz(path, buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "SubwordEncoderParams":
        with np.load(path, allow_pickle=False) as z:
            manifest = json.loads(str(z["manifest"]))
            if manifest.get("format") != ENCODER_FORMAT:
                raise ValueError(f"{path}: unsupported encoder format {manifest.get('format')!r}")
            arrays = {k: z[k] for k in manifest["shapes"]}
        for k, shape in manifest["shapes"].items():
            if list(arrays[k].shape) != shape:
                raise ValueError(f"{path}: tensor {k} has shape {arrays[k].shape}, manifest says {shape}")
        return cls(**arrays, loss_trace=list(manifest.get("loss_trace", [])))


def _write_deterministic_npz(path, data: bytes) -> None:
    # np.savez stamps the current time into zip entries; rewrite with a fixed date
    src = zipfile.ZipFile(io.BytesIO(data))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as dst:
        for info in sorted(src.infolist(), key=lambda i: i.filename):
            fixed = zipfile.ZipInfo(info.filename, date_time=(1980, 1, 1, 0, 0, 0))
            dst.writestr(fixed, src.read(info.filename))


@lru_cache(maxsize=65536)
def _token_hash(token: str, dims: int) -> tuple[np.ndarray, np.ndarray]:
    tri = letter_trigrams([token], dims)
    ids = np.fromiter(sorted(tri), dtype=np.int64, count=len(tri))
    counts = np.array([tri[i] for i in ids.tolist()], dtype=np.float64)
    return ids, counts


class _Trace:
    __slots__ = ("hashes", "windows", "conv", "argmax", "pooled", "out")


def _forward(tokens: Sequence[str], p: SubwordEncoderParams) -> tuple[np.ndarray, _Trace]:
    d_sub = p.trigram_emb.shape[1]
    hashes = [_token_hash(t, p.dims) for t in tokens]
    n = max(len(hashes), WINDOW)
    x = np.zeros((n, d_sub))
    for i, (ids, counts) in enumerate(hashes):
        x[i] = counts @ p.trigram_emb[ids]
    windows = np.stack([x[i : i + WINDOW].reshape(-1) for i in range(n - WINDOW + 1)])
    conv = np.tanh(windows @ p.conv_w.T + p.conv_b)
    argmax = conv.argmax(axis=0)
    pooled = conv[argmax, np.arange(conv.shape[1])]
    out = np.tanh(p.proj_w @ pooled + p.proj_b)
    tr = _Trace()
    tr.hashes, tr.windows, tr.conv, tr.argmax, tr.pooled, tr.out = hashes, windows, conv, argmax, pooled, out
    return out, tr


def _backward(d_out: np.ndarray, tr: _Trace, p: SubwordEncoderParams, grads: dict) -> None:
    d_sub = p.trigram_emb.shape[1]
    da = d_out * (1.0 - tr.out ** 2)
    grads["proj_w"] += np.outer(da, tr.pooled)
    grads["proj_b"] += da
    d_pooled = p.proj_w.T @ da
    d_conv = np.zeros_like(tr.conv)
    d_conv[tr.argmax, np.arange(tr.conv.shape[1])] = d_pooled
    d_pre = d_conv * (1.0 - tr.conv ** 2)
    grads["conv_w"] += d_pre.T @ tr.windows
    grads["conv_b"] += d_pre.sum(axis=0)
    d_windows = d_pre @ p.conv_w
    n = d_windows.shape[0] + WINDOW - 1
    dx = np.zeros((n, d_sub))
    for i in range(d_windows.shape[0]):
        dx[i : i + WINDOW] += d_windows[i].reshape(WINDOW, d_sub)
    rows, vals = grads["trigram_emb"]
    for i, (ids, counts) in enumerate(tr.hashes):
        rows.append(ids)
        vals.append(np.outer(counts, dx[i]))


def subword_encode(tokens: Sequence[str] | str, params: SubwordEncoderParams) -> np.ndarray:
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    return _forward(tokens, params)[0]


@dataclass
class EncoderTrainConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    batch_size: int = 16
    negatives: int = 4
    gamma: float = 10.0  # softmax smoothing on cosine similarities
    seed: int = 0
    dims: int = DEFAULT_TRIGRAM_DIMS
    d_sub: int = 32
    channels: int = 64
    d_out: int = 32


def _cos_and_grads(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    na = float(np.linalg.norm(a)) + 1e-12
    nb = float(np.linalg.norm(b)) + 1e-12
    c = float(a @ b) / (na * nb)
    return c, b / (na * nb) - c * a / na ** 2, a / (na * nb) - c * b / nb ** 2


def _zero_grads(p: SubwordEncoderParams) -> dict:
    return {"trigram_emb": ([], []), "conv_w": np.zeros_like(p.conv_w), "conv_b": np.zeros_like(p.conv_b),
            "proj_w": np.zeros_like(p.proj_w), "proj_b": np.zeros_like(p.proj_b)}


def batch_loss_and_grads(batch: list[tuple[list[str], list[str]]], negatives: list[list[int]],
                         p: SubwordEncoderParams, gamma: float) -> tuple[float, dict]:
    """Mean softmax loss of each left text picking its paraphrase over the listed negatives.

    ``negatives[i]`` indexes right-hand texts in the same batch.
    """
    left = [_forward(a, p) for a, _ in batch]
    right = [_forward(b, p) for _, b in batch]
    d_left = [np.zeros(p.out_dim) for _ in batch]
    d_right = [np.zeros(p.out_dim) for _ in batch]
    total = 0.0
    scale = 1.0 / len(batch)
    for i, negs in enumerate(negatives):
        cands = [i] + list(negs)
        sims = []
        parts = []
        for j in cands:
            c, ga, gb = _cos_and_grads(left[i][0], right[j][0])
            sims.append(gamma * c)
            parts.append((j, ga, gb))
        sims = np.array(sims)
        sims -= sims.max()
        prob = np.exp(sims) / np.exp(sims).sum()
        total += -np.log(prob[0])
        dlogit = prob.copy()
        dlogit[0] -= 1.0
        for k, (j, ga, gb) in enumerate(parts):
            g = scale * gamma * dlogit[k]
            d_left[i] += g * ga
            d_right[j] += g * gb
    grads = _zero_grads(p)
    for (_, tr), d in zip(left, d_left):
        _backward(d, tr, p, grads)
    for (_, tr), d in zip(right, d_right):
        _backward(d, tr, p, grads)
    return total * scale, grads


def _sample_negatives(rng: np.random.Generator, size: int, n_neg: int) -> list[list[int]]:
    out = []
    for i in range(size):
        others = [j for j in range(size) if j != i]
        k = min(n_neg, len(others))
        out.append(sorted(rng.choice(others, size=k, replace=False).tolist()) if k else [])
    return out


def train_subword_encoder(pairs: Sequence[tuple[str, str]], config: EncoderTrainConfig | None = None
                          ) -> SubwordEncoderParams:
    """SGD on paraphrase pairs with in-batch sampled negatives; per-epoch mean loss kept in ``loss_trace``."""
    cfg = config or EncoderTrainConfig()
    data = [(tokenize(a), tokenize(b)) for a, b in pairs]
    data = [(a, b) for a, b in data if a and b]
    if not data:
        raise ValueError("paraphrase training set is empty")
    rng = np.random.default_rng(cfg.seed)
    p = SubwordEncoderParams.init(cfg.dims, cfg.d_sub, cfg.channels, cfg.d_out, seed=int(rng.integers(2**31)))
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            negs = _sample_negatives(rng, len(batch), cfg.negatives)
            loss, grads = batch_loss_and_grads(batch, negs, p, cfg.gamma)
            losses.append(loss * len(batch))
            _sgd_step(p, grads, cfg.learning_rate)
        trace.append(float(sum(losses) / len(data)))
        logger.info("cdssm epoch %d loss %.4f", epoch + 1, trace[-1])
    p.loss_trace = trace
    return p


def _sgd_step(p: SubwordEncoderParams, grads: dict, lr: float) -> None:
    rows, vals = grads["trigram_emb"]
    if rows:
        np.add.at(p.trigram_emb, np.concatenate(rows), -lr * np.concatenate(vals))
    for name in ("conv_w", "conv_b", "proj_w", "proj_b"):
        getattr(p, name)[...] -= lr * grads[name]


def dense_trigram_grad(p: SubwordEncoderParams, grads: dict) -> np.ndarray:
    out = np.zeros_like(p.trigram_emb)
    rows, vals = grads["trigram_emb"]
    if rows:
        np.add.at(out, np.concatenate(rows), np.concatenate(vals))
    return out
