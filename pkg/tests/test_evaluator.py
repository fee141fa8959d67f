import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from archeval.evaluator import gradcheck
from archeval.evaluator.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from archeval.evaluator.estimator import SurrogateRegressor, TrainingDivergedError
from archeval.evaluator.model import ModelConfig, backward, encode, forward, head, init_params
from archeval.evaluator.training import train_evaluator
from archeval.costmodel import DatasetError
from archeval.netstring import pad_sequences, tokenize


def _tiny(dtype=np.float64, **kw):
    cfg = replace(gradcheck.tiny_config(), **kw)
    return cfg, init_params(cfg, np.random.default_rng(0), dtype=dtype)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-4), (np.float32, 1e-2)])
def test_grad_check(dtype, tol):
    cfg = gradcheck.tiny_config()
    tokens, targets = gradcheck.tiny_sample(cfg)
    worst, per_group = gradcheck.grad_check(cfg, tokens, targets, eps=1e-5, dtype=dtype)
    assert worst < tol, per_group
    # every parameter tensor was checked
    assert set(per_group) == set(init_params(cfg, np.random.default_rng(0)))


def test_grad_check_first_token_readout():
    cfg = replace(gradcheck.tiny_config(), readout="first", n_layers=2)
    tokens, targets = gradcheck.tiny_sample(cfg, seed=3)
    assert gradcheck.grad_check(cfg, tokens, targets)[0] < 1e-4


def test_single_token_embedding():
    cfg, p = _tiny()
    alone, _ = encode(p, np.array([[4]]), cfg)
    padded, _ = encode(p, np.array([[4, 0, 0, 0, 0]]), cfg)
    np.testing.assert_allclose(padded, alone, rtol=1e-12, atol=1e-12)


def test_inference_deterministic():
    cfg, p = _tiny()
    tokens, _ = gradcheck.tiny_sample(cfg)
    a, _ = forward(p, tokens, cfg)
    b, _ = forward(p, tokens, cfg)
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=6), st.integers(0, 6), st.integers(0, 6))
def test_pad_tail_invariance(body, pad_a, pad_b):
    # masked attention + masked pooling: the PAD tail has no influence
    cfg, p = _tiny()
    a, _ = encode(p, np.array([body + [0] * pad_a]), cfg)
    b, _ = encode(p, np.array([body + [0] * pad_b]), cfg)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_encode_errors():
    cfg, p = _tiny()
    with pytest.raises(ValueError, match="non-empty"):
        encode(p, np.zeros((1, 0), dtype=int), cfg)
    with pytest.raises(ValueError, match="outside"):
        encode(p, np.array([[1, cfg.vocab_size]]), cfg)
    with pytest.raises(ValueError, match="exceeds"):
        encode(p, np.ones((1, cfg.max_len + 1), dtype=int), cfg)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)


def test_head_affine_identity():
    cfg, p = _tiny()
    rng = np.random.default_rng(1)
    e1, e2 = rng.normal(size=(2, 1, cfg.d_model))
    zero = np.zeros((1, cfg.d_model))
    lhs = head(p, e1 + e2) + head(p, zero)
    np.testing.assert_allclose(lhs, head(p, e1) + head(p, e2), rtol=1e-12, atol=1e-12)


def _toy_regression(n=16, length=6, vocab=12, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(1, vocab, size=(n, length))
    Y = np.stack([X.sum(1) * 1.0, (X[:, 0] * 3.0) + rng.normal(size=n)], axis=1)
    return X, Y


def test_zero_weight_head_predicts_denormalized_bias():
    X, Y = _toy_regression()
    reg = SurrogateRegressor(vocab_size=12, d_model=16, n_heads=2, ffn_dim=32, epochs=1).fit(X, Y)
    reg.params_["head.w"][:] = 0
    reg.params_["head.b"][:] = [0.5, -2.0]
    expected = np.array([0.5, -2.0]) * reg.target_std_ + reg.target_mean_
    np.testing.assert_allclose(reg.predict(X), np.tile(expected, (len(X), 1)), rtol=1e-6)
    # zero predictor on z-scored targets -> loss 1 per metric
    reg.params_["head.b"][:] = 0
    assert reg.loss(X, Y) == pytest.approx(1.0, abs=1e-6)
    perm = np.random.default_rng(0).permutation(len(X))
    assert reg.loss(X[perm], Y[perm]) == pytest.approx(reg.loss(X, Y), abs=1e-12)


def test_normalization_invertible():
    X, Y = _toy_regression()
    reg = SurrogateRegressor(vocab_size=12, d_model=16, n_heads=2, ffn_dim=32, epochs=1).fit(X, Y)
    M = np.random.default_rng(2).normal(1e3, 1e2, size=(50, 2))
    np.testing.assert_allclose(reg.denormalize(reg.normalize(M)), M, rtol=1e-9)


def test_overfit_sixteen_records():
    X, Y = _toy_regression()
    reg = SurrogateRegressor(vocab_size=12, d_model=32, n_heads=4, ffn_dim=64, epochs=500,
                             dropout_p=0.0).fit(X, Y)
    assert reg.loss(X, Y) < 1e-3


def test_bit_reproducible_history():
    X, Y = _toy_regression(n=40)
    kw = dict(vocab_size=12, d_model=16, n_heads=2, ffn_dim=32, epochs=5, batch_size=8, random_state=3)
    a = SurrogateRegressor(**kw).fit(X[:32], Y[:32], X[32:], Y[32:])
    b = SurrogateRegressor(**kw).fit(X[:32], Y[:32], X[32:], Y[32:])
    strip = lambda h: [{k: v for k, v in r.items() if k != "seconds"} for r in h]  # noqa: E731
    assert strip(a.history_) == strip(b.history_)
    for k in a.params_:
        assert np.array_equal(a.params_[k], b.params_[k])
    assert len(a.history_) == 5 and "val_loss_per_output" in a.history_[0]


def test_full_batch_gradient_order_invariant():
    cfg, p = _tiny()
    tokens, targets = gradcheck.tiny_sample(cfg, batch=5)
    perm = np.array([3, 0, 4, 1, 2])

    def grads(t, y):
        out, cache = forward(p, t, cfg)
        return backward(p, cache, 2 * (out - y) / out.size, cfg)

    g1, g2 = grads(tokens, targets), grads(tokens[perm], targets[perm])
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


def test_head_only_closed_form():
    # final norm with zero gain/bias gives a zero embedding: head.w grad is 0, head.b grad is sum(dout)
    cfg, p = _tiny()
    p["lnf.g"][:] = 0
    p["lnf.b"][:] = 0
    tokens, targets = gradcheck.tiny_sample(cfg)
    out, cache = forward(p, tokens, cfg)
    np.testing.assert_array_equal(out, np.tile(p["head.b"], (len(tokens), 1)))
    dout = 2 * (out - targets) / out.size
    g = backward(p, cache, dout, cfg)
    assert np.array_equal(g["head.w"], np.zeros_like(p["head.w"]))
    assert np.array_equal(g["head.b"], dout.sum(0))
    assert not g["l0.ffn.w1"].any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    X, Y = _toy_regression()
    reg = SurrogateRegressor(vocab_size=12, d_model=16, n_heads=2, ffn_dim=32, epochs=50,
                             optimizer="sgd", learning_rate=1e30)
    with pytest.raises(TrainingDivergedError, match="learning_rate"):
        reg.fit(X, Y)


def test_fit_validation():
    X, Y = _toy_regression()
    with pytest.raises(ValueError, match="constant"):
        SurrogateRegressor(epochs=1).fit(X, np.ones(len(X)))
    with pytest.raises(ValueError):
        SurrogateRegressor(epochs=1, lr_schedule="step").fit(X, Y)
    with pytest.raises(ValueError):
        SurrogateRegressor(epochs=1, learning_rate=0).fit(X, Y)


def test_sklearn_params_roundtrip():
    reg = SurrogateRegressor(d_model=32, lr_schedule="cosine")
    assert reg.get_params()["d_model"] == 32
    assert SurrogateRegressor(**reg.get_params()).get_params() == reg.get_params()


def test_one_dimensional_target():
    X, Y = _toy_regression()
    reg = SurrogateRegressor(vocab_size=12, d_model=16, n_heads=2, ffn_dim=32, epochs=2).fit(X, Y[:, 0])
    assert reg.predict(X).shape == (len(X),)


def test_k2_evaluator_labels(small_evaluator):
    ev = small_evaluator.evaluator
    assert ev.regressor.config_.k_outputs == 3
    pred = ev.predict_one("tss/125")
    assert list(pred) == ["accuracy", "memory", "latency"]


def test_memory_learned_faster_than_accuracy(small_evaluator):
    acc, mem, _ = small_evaluator.evaluator.regressor.history_[-1]["val_loss_per_output"]
    assert mem < acc


def test_unknown_objective(small_dataset):
    with pytest.raises(DatasetError, match="dataset provides"):
        train_evaluator(small_dataset, ["energy"])
    with pytest.raises(DatasetError):
        train_evaluator(small_dataset, [])


def test_checkpoint_roundtrip(tmp_path, small_evaluator):
    ev = small_evaluator.evaluator
    path = tmp_path / "ck.json"
    save_checkpoint(ev, path)
    loaded = load_checkpoint(path, expected_vocab_digest=ev.vocab.digest)
    for k, v in ev.regressor.params_.items():
        assert np.array_equal(v, loaded.regressor.params_[k]) and v.dtype == loaded.regressor.params_[k].dtype
    strings = small_evaluator.strings[:20]
    assert np.array_equal(ev.predict_strings(strings), loaded.predict_strings(strings))
    assert loaded.objectives == ev.objectives and loaded.seq_len == ev.seq_len == 160


def test_checkpoint_refusals(tmp_path, small_evaluator):
    ev = small_evaluator.evaluator
    path = tmp_path / "ck.json"
    save_checkpoint(ev, path)
    with pytest.raises(CheckpointError, match="does not match expected"):
        load_checkpoint(path, expected_vocab_digest="0" * 64)
    text = path.read_text()
    cut = tmp_path / "cut.json"
    cut.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match=r"offset \d+"):
        load_checkpoint(cut)
    bumped = tmp_path / "v2.json"
    bumped.write_text(text.replace('"version": 1', '"version": 2', 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bumped)


def test_truncation_uses_prefix(small_evaluator):
    ev = small_evaluator.evaluator
    s = small_evaluator.strings[0]
    full = tokenize(s, ev.vocab, 512)
    assert np.array_equal(ev.tokens([s])[0], pad_sequences([full])[0][: ev.seq_len])
    assert math.isfinite(ev.predict_strings([s])[0, 0])
