import numpy as np
import pytest

from tabret.cdssm import (
    EncoderTrainConfig,
    SubwordEncoderParams,
    _forward,
    batch_loss_and_grads,
    dense_trigram_grad,
    subword_encode,
    train_subword_encoder,
)
from tabret.features import cosine
from tabret.synthetic import generate

SMALL = dict(dims=2048, d_sub=16, channels=32, d_out=16)


@pytest.fixture(scope="module")
def pairs():
    return generate(2017).paraphrases


@pytest.fixture(scope="module")
def trained(pairs):
    return train_subword_encoder(pairs[:100], EncoderTrainConfig(epochs=5, seed=3))


def test_deterministic_encoding():
    p = SubwordEncoderParams.init(**SMALL, seed=5)
    a = subword_encode(["rivers", "of", "poland"], p)
    np.testing.assert_array_equal(a, subword_encode("Rivers of Poland", p))


def test_single_token_one_window():
    p = SubwordEncoderParams.init(**SMALL, seed=5)
    _, tr = _forward(["river"], p)
    assert tr.windows.shape[0] == 1
    np.testing.assert_array_equal(tr.pooled, tr.conv[0])


def test_output_finite_nonzero():
    p = SubwordEncoderParams.init(**SMALL, seed=9)
    v = subword_encode(["list", "of", "lakes"], p)
    assert np.all(np.isfinite(v)) and np.linalg.norm(v) > 0


def test_backward_matches_finite_differences():
    p = SubwordEncoderParams.init(dims=256, d_sub=6, channels=8, d_out=5, seed=2, scale=0.5)
    batch = [(["polish", "rivers"], ["rivers", "in", "poland"]), (["lakes"], ["list", "of", "lakes"]),
             (["alpha", "beta", "gamma", "delta"], ["beta"])]
    negs = [[1, 2], [0], [0, 1]]
    _, grads = batch_loss_and_grads(batch, negs, p, 10.0)
    dense = {"trigram_emb": dense_trigram_grad(p, grads), **{k: grads[k] for k in ("conv_w", "conv_b", "proj_w", "proj_b")}}
    rng = np.random.default_rng(0)
    eps = 1e-6
    for name, tensor in p.tensors().items():
        flat = tensor.reshape(-1)
        pool = np.flatnonzero(dense[name].reshape(-1)) if name == "trigram_emb" else np.arange(flat.size)
        for idx in rng.choice(pool, size=min(20, pool.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = batch_loss_and_grads(batch, negs, p, 10.0)[0]
            flat[idx] = orig - eps
            down = batch_loss_and_grads(batch, negs, p, 10.0)[0]
            flat[idx] = orig
            num = (up - down) / (2 * eps)
            ana = dense[name].reshape(-1)[idx]
            assert abs(ana - num) / max(abs(ana), abs(num), 1e-6) < 1e-4, name


def test_loss_decreases(trained):
    assert len(trained.loss_trace) == 5
    assert trained.loss_trace[-1] < trained.loss_trace[0]


def test_seed_reproducible(pairs, trained):
    again = train_subword_encoder(pairs[:100], EncoderTrainConfig(epochs=5, seed=3))
    for k, v in trained.tensors().items():
        assert np.array_equal(v, again.tensors()[k]), k


def test_heldout_paraphrases_closer(pairs, trained):
    held = pairs[100:]
    wins = total = 0
    for i, (a, b) in enumerate(held):
        va, vb = subword_encode(a, trained), subword_encode(b, trained)
        for j, (_, other) in enumerate(held):
            if i != j:
                wins += cosine(va, vb) > cosine(va, subword_encode(other, trained))
                total += 1
    assert wins / total >= 0.8


def test_save_load_bytes(tmp_path, trained):
    trained.save(tmp_path / "a.npz")
    back = SubwordEncoderParams.load(tmp_path / "a.npz")
    back.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    assert back.loss_trace == trained.loss_trace


def test_empty_training_set():
    with pytest.raises(ValueError):
        train_subword_encoder([("", "!!")], EncoderTrainConfig(**SMALL))


def test_shape_mismatch_rejected():
    p = SubwordEncoderParams.init(**SMALL)
    with pytest.raises(ValueError):
        SubwordEncoderParams(p.trigram_emb, p.conv_w[:, :5], p.conv_b, p.proj_w, p.proj_b)
