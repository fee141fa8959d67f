"""Pre-norm transformer encoder + dense regression head, forward and backward in numpy.

Parameters live in a flat ``dict[str, ndarray]``. :func:`forward` returns the
head output and a cache; :func:`backward` turns an upstream gradient on the
head output into a gradient dict with the same keys as the parameters.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

PAD = 0
_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    k_outputs: int = 1
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 512
    dropout_p: float = 0.1
    readout: str = "mean"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.k_outputs < 1:
            raise ValueError("k_outputs must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.readout not in ("mean", "first"):
            raise ValueError("readout must be 'mean' or 'first'")
        if min(self.vocab_size, self.n_layers, self.ffn_dim, self.max_len) < 1:
            raise ValueError("vocab_size, n_layers, ffn_dim and max_len must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    d, f = cfg.d_model, cfg.ffn_dim

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    p = {
        "tok_emb": rng.normal(0.0, 0.1, size=(cfg.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.02, size=(cfg.max_len, d)),
    }
    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = dense(d, d)
            p[pre + "attn.b" + name[1]] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = dense(d, f)
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = dense(f, d)
        p[pre + "ffn.b2"] = np.zeros(d)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    p["head.w"] = dense(d, cfg.k_outputs) * 0.1
    p["head.b"] = np.zeros(cfg.k_outputs)
    return {k: v.astype(dtype) for k, v in p.items()}


def _layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_back(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _dropout(x, p, rng):
    if rng is None or p == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def _check_tokens(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError("token sequences must be non-empty")
    if tokens.shape[1] > cfg.max_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len={cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    if not (tokens != PAD).any(axis=1).all():
        raise ValueError("every sequence needs at least one non-PAD token")
    return tokens


def encode(params, tokens, cfg: ModelConfig, rng: np.random.Generator | None = None):
    """Token ids (B, n) -> embeddings (B, d). Dropout is active iff ``rng`` is given."""
    tokens = _check_tokens(tokens, cfg)
    B, n = tokens.shape
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    p_drop = cfg.dropout_p
    mask = tokens != PAD
    key_bias = np.where(mask, 0.0, _NEG).astype(params["tok_emb"].dtype)[:, None, None, :]
    cache = {"tokens": tokens, "mask": mask, "layers": []}

    x = params["tok_emb"][tokens] + params["pos_emb"][:n]
    x, cache["drop_in"] = _dropout(x, p_drop, rng)
    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        lc = {}
        h, lc["ln1"] = _layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])

        def heads(w, b):
            return (h @ params[pre + "attn." + w] + params[pre + "attn." + b]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        # in-place softmax: the (B, H, n, n) buffers dominate run time
        a = (q * (1.0 / math.sqrt(dh))) @ k.transpose(0, 1, 3, 2)
        a += key_bias
        a -= a.max(-1, keepdims=True)
        np.exp(a, out=a)
        a /= a.sum(-1, keepdims=True)
        ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        o = ctx @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
        o, lc["drop1"] = _dropout(o, p_drop, rng)
        x = x + o
        lc.update(h=h, q=q, k=k, v=v, a=a, ctx=ctx)

        h2, lc["ln2"] = _layernorm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u = h2 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        r = np.maximum(u, 0)
        f = r @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        f, lc["drop2"] = _dropout(f, p_drop, rng)
        x = x + f
        lc.update(h2=h2, u=u, r=r)
        cache["layers"].append(lc)

    z, cache["lnf"] = _layernorm(x, params["lnf.g"], params["lnf.b"])
    if cfg.readout == "mean":
        w = (mask / mask.sum(1, keepdims=True)).astype(z.dtype)
    else:
        w = np.zeros(mask.shape, dtype=z.dtype)
        w[:, 0] = 1.0
    cache["pool_w"] = w
    e = np.einsum("bn,bnd->bd", w, z)
    return e, cache


def head(params, e):
    return e @ params["head.w"] + params["head.b"]


def forward(params, tokens, cfg: ModelConfig, rng=None):
    e, cache = encode(params, tokens, cfg, rng)
    cache["e"] = e
    return head(params, e), cache


def backward(params, cache, dout, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of sum(dout * output) with respect to every parameter."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    tokens = cache["tokens"]
    B, n = tokens.shape
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H

    grads["head.w"] = cache["e"].T @ dout
    grads["head.b"] = dout.sum(0)
    de = dout @ params["head.w"].T
    dz = cache["pool_w"][:, :, None] * de[:, None, :]
    dx, grads["lnf.g"], grads["lnf.b"] = _layernorm_back(dz, cache["lnf"])

    for layer in reversed(range(cfg.n_layers)):
        pre = f"l{layer}."
        lc = cache["layers"][layer]
        # feed-forward branch
        df = dx if lc["drop2"] is None else dx * lc["drop2"]
        df2 = df.reshape(-1, d)
        grads[pre + "ffn.w2"] = lc["r"].reshape(-1, cfg.ffn_dim).T @ df2
        grads[pre + "ffn.b2"] = df2.sum(0)
        dr = df @ params[pre + "ffn.w2"].T
        du = dr * (lc["u"] > 0)
        du2 = du.reshape(-1, cfg.ffn_dim)
        grads[pre + "ffn.w1"] = lc["h2"].reshape(-1, d).T @ du2
        grads[pre + "ffn.b1"] = du2.sum(0)
        dh2 = du @ params[pre + "ffn.w1"].T
        dln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layernorm_back(dh2, lc["ln2"])
        dx = dx + dln
        # attention branch
        do = dx if lc["drop1"] is None else dx * lc["drop1"]
        do2 = do.reshape(-1, d)
        grads[pre + "attn.wo"] = lc["ctx"].reshape(-1, d).T @ do2
        grads[pre + "attn.bo"] = do2.sum(0)
        dctx = (do @ params[pre + "attn.wo"].T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        a, q, k, v = lc["a"], lc["q"], lc["k"], lc["v"]
        dv = a.transpose(0, 1, 3, 2) @ dctx
        ds = dctx @ v.transpose(0, 1, 3, 2)
        ds -= np.einsum("bhij,bhij->bhi", ds, a)[..., None]
        ds *= a
        ds *= 1.0 / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        h2d = lc["h"].reshape(-1, d)
        dh_total = np.zeros((B * n, d), dtype=dx.dtype)
        for name, g in (("q", dq), ("k", dk), ("v", dv)):
            g2 = g.transpose(0, 2, 1, 3).reshape(-1, d)
            grads[pre + "attn.w" + name] = h2d.T @ g2
            grads[pre + "attn.b" + name] = g2.sum(0)
            dh_total += g2 @ params[pre + "attn.w" + name].T
        dln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layernorm_back(dh_total.reshape(B, n, d), lc["ln1"])
        dx = dx + dln

    if cache["drop_in"] is not None:
        dx = dx * cache["drop_in"]
    grads["pos_emb"][:n] = dx.sum(0)
    # scatter-add rows by token id (sorted segments; np.add.at is slow)
    flat = tokens.ravel()
    order = np.argsort(flat, kind="stable")
    ids, starts = np.unique(flat[order], return_index=True)
    grads["tok_emb"][ids] = np.add.reduceat(dx.reshape(-1, d)[order], starts, axis=0)
    return grads


def n_params(params) -> int:
    return int(sum(v.size for v in params.values()))
