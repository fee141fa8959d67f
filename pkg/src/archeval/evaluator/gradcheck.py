"""Finite-difference verification of the hand-written backward pass."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .model import ModelConfig, backward, forward, init_params


def mse_loss(params, tokens, targets, cfg: ModelConfig) -> float:
    out, _ = forward(params, tokens, cfg)
    return float(np.mean((out - targets) ** 2))


def grad_check(cfg: ModelConfig, tokens, targets, *, eps: float = 1e-5, coords_per_group: int = 20,
               seed: int = 0, dtype=np.float64, params=None) -> tuple[float, dict[str, float]]:
    """Max relative error between analytic and central-difference gradients.

    Dropout is disabled. For each parameter tensor, ``coords_per_group``
    coordinates (or all, if fewer) are perturbed by +-eps. Relative error is
    ``|a - n| / max(|a| + |n|, 1e-6)``.

    The analytic gradient is computed in ``dtype``; the finite differences are
    always taken in float64 on the same parameter values, since float32 loss
    differences drown in rounding noise for small gradient coordinates.

    Returns the overall maximum and the per-tensor maxima.
    """
    cfg = replace(cfg, dropout_p=0.0)
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(cfg, rng, dtype=np.float64)
        # non-trivial norms and head so every group carries signal
        for name in params:
            if name.endswith((".g", ".b", "bq", "bk", "bv", "bo", "b1", "b2")) or name == "head.w":
                params[name] = params[name] + rng.normal(0, 0.3, params[name].shape)
    # round through dtype so both paths see identical parameter values
    params = {k: np.asarray(v).astype(dtype).astype(np.float64) for k, v in params.items()}
    tokens = np.asarray(tokens)
    targets = np.asarray(targets, dtype=np.float64).reshape(tokens.shape[0] if tokens.ndim == 2 else 1, -1)

    low = {k: v.astype(dtype) for k, v in params.items()}
    out, cache = forward(low, tokens, cfg)
    dout = (2.0 * (out - targets.astype(dtype)) / out.size).astype(dtype)
    grads = backward(low, cache, dout, cfg)

    used_rows = np.unique(np.asarray(tokens))
    per_group = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        if name == "tok_emb":
            # rows of tokens absent from the sample have zero gradient both ways
            candidates = (used_rows[:, None] * value.shape[1] + np.arange(value.shape[1])).ravel()
        elif name == "pos_emb":
            candidates = np.arange(tokens.shape[-1] * value.shape[1])
        else:
            candidates = np.arange(flat.size)
        pick = candidates if candidates.size <= coords_per_group else rng.choice(candidates, coords_per_group, replace=False)
        worst = 0.0
        for i in pick:
            old = flat[i]
            flat[i] = old + eps
            up = mse_loss(params, tokens, targets, cfg)
            flat[i] = old - eps
            down = mse_loss(params, tokens, targets, cfg)
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            analytic = float(grads[name].reshape(-1)[i])
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            worst = max(worst, err)
        per_group[name] = worst
    return max(per_group.values()), per_group


def tiny_config(vocab_size: int = 10, k_outputs: int = 2) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, k_outputs=k_outputs, d_model=8, n_layers=1,
                       n_heads=2, ffn_dim=16, max_len=12, dropout_p=0.0)


def tiny_sample(cfg: ModelConfig, seed: int = 0, batch: int = 3, length: int = 10):
    """Random token batch (with PAD tails) and targets for the tiny config."""
    rng = np.random.default_rng(seed)
    tokens = rng.integers(1, cfg.vocab_size, size=(batch, length))
    for row in range(1, batch):
        tokens[row, length - 2 * row:] = 0
    targets = rng.normal(size=(batch, cfg.k_outputs))
    return tokens, targets
