"""Pre-norm transformer encoder in numpy with hand-written backward pass.

Only what the watermark policy needs: token + position embeddings, ``L`` encoder
blocks (multi-head self-attention and a GELU MLP, each behind a LayerNorm), a
final LayerNorm on the last position and a linear head of width ``|V| + 1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = ["PolicyConfig", "PAPER_PRESET", "init_params", "forward", "backward", "param_names"]

LN_EPS = 1e-5
GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    context: int = 4
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context < 1:
            raise ValueError("context must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def PAPER_PRESET(vocab_size: int, context: int = 10) -> PolicyConfig:
    """Full-size architecture (d=512, 6 layers, 8 heads, ff 2048, dropout 0.2)."""
    return PolicyConfig(vocab_size, context, 512, 6, 8, 2048, 0.2)


def param_names(cfg: PolicyConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layers):
        p = f"l{i}."
        names += [p + n for n in ("ln1.g", "ln1.b", "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
                                  "ln2.g", "ln2.b", "W1", "b1", "W2", "b2")]
    names += ["lnf.g", "lnf.b", "out.W", "out.b"]
    return names


def init_params(cfg: PolicyConfig, rng: np.random.Generator, std: float = 0.02,
                zero_head: bool = False) -> dict[str, np.ndarray]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"tok_emb": (V, d), "pos_emb": (cfg.context, d), "lnf.g": (d,), "lnf.b": (d,),
              "out.W": (d, V + 1), "out.b": (V + 1,)}
    for i in range(cfg.n_layers):
        p = f"l{i}."
        shapes.update({p + "ln1.g": (d,), p + "ln1.b": (d,), p + "ln2.g": (d,), p + "ln2.b": (d,),
                       p + "Wq": (d, d), p + "Wk": (d, d), p + "Wv": (d, d), p + "Wo": (d, d),
                       p + "bq": (d,), p + "bk": (d,), p + "bv": (d,), p + "bo": (d,),
                       p + "W1": (d, f), p + "b1": (f,), p + "W2": (f, d), p + "b2": (d,)})
    params = {}
    for name in param_names(cfg):
        shape = shapes[name]
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, std, size=shape)
    if zero_head:
        params["out.W"][:] = 0.0
        params["out.b"][:] = 0.0
    return params


# ----------------------------------------------------------------- primitives


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd, g)


def _ln_bwd(dy, cache):
    xh, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xh).sum(red)
    db = dy.sum(red)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(u):
    inner = GELU_C * (u + 0.044715 * u ** 3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), (u, t)


def _gelu_bwd(dy, cache):
    u, t = cache
    dinner = GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _lin(x, W, b):
    return x @ W + b


def _lin_bwd(dy, x, W):
    d_in, d_out = W.shape
    dW = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    db = dy.reshape(-1, d_out).sum(0)
    return dy @ W.T, dW, db


# -------------------------------------------------------------------- network


def forward(params: dict[str, np.ndarray], cfg: PolicyConfig, ids: np.ndarray,
            rng: np.random.Generator | None = None):
    """Map context windows ``ids`` (B, c) to head outputs (B, |V|+1).

    Dropout on the embedding sum is applied only when ``rng`` is given.
    Returns ``(out, cache)``; ``cache`` feeds :func:`backward`.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != cfg.context:
        raise ValueError(f"expected windows of shape (B, {cfg.context}), got {ids.shape}")
    B, c = ids.shape
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    h = params["tok_emb"][ids] + params["pos_emb"][None, :, :]
    drop_mask = None
    if rng is not None and cfg.dropout > 0:
        keep = 1.0 - cfg.dropout
        drop_mask = (rng.random(h.shape) < keep) / keep
        h = h * drop_mask
    caches = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        a, ln1 = _ln_fwd(h, params[p + "ln1.g"], params[p + "ln1.b"])
        q = _lin(a, params[p + "Wq"], params[p + "bq"]).reshape(B, c, H, dh).transpose(0, 2, 1, 3)
        k = _lin(a, params[p + "Wk"], params[p + "bk"]).reshape(B, c, H, dh).transpose(0, 2, 1, 3)
        v = _lin(a, params[p + "Wv"], params[p + "bv"]).reshape(B, c, H, dh).transpose(0, 2, 1, 3)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh))
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, c, d)
        h = h + _lin(o, params[p + "Wo"], params[p + "bo"])
        m, ln2 = _ln_fwd(h, params[p + "ln2.g"], params[p + "ln2.b"])
        u = _lin(m, params[p + "W1"], params[p + "b1"])
        gu, gc = _gelu_fwd(u)
        h = h + _lin(gu, params[p + "W2"], params[p + "b2"])
        caches.append((a, ln1, q, k, v, att, o, m, ln2, gu, gc))
    last = h[:, -1, :]
    n, lnf = _ln_fwd(last, params["lnf.g"], params["lnf.b"])
    out = _lin(n, params["out.W"], params["out.b"])
    return out, (ids, drop_mask, caches, n, lnf)


def backward(params: dict[str, np.ndarray], cfg: PolicyConfig, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dout * out)`` with respect to every parameter."""
    ids, drop_mask, caches, n, lnf = cache
    B, c = ids.shape
    H, d = cfg.n_heads, cfg.d_model
    dh_ = d // H
    grads: dict[str, np.ndarray] = {}
    dn, grads["out.W"], grads["out.b"] = _lin_bwd(dout, n, params["out.W"])
    dlast, grads["lnf.g"], grads["lnf.b"] = _ln_bwd(dn, lnf)
    dh = np.zeros((B, c, d))
    dh[:, -1, :] = dlast
    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        a, ln1, q, k, v, att, o, m, ln2, gu, gc = caches[i]
        # MLP branch
        dgu, grads[p + "W2"], grads[p + "b2"] = _lin_bwd(dh, gu, params[p + "W2"])
        du = _gelu_bwd(dgu, gc)
        dm, grads[p + "W1"], grads[p + "b1"] = _lin_bwd(du, m, params[p + "W1"])
        dx, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_bwd(dm, ln2)
        dh = dh + dx
        # attention branch
        do, grads[p + "Wo"], grads[p + "bo"] = _lin_bwd(dh, o, params[p + "Wo"])
        do = do.reshape(B, c, H, dh_).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) / np.sqrt(dh_)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, c, d)  # noqa: E731
        da = np.zeros((B, c, d))
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dai, grads[p + "W" + name], grads[p + "b" + name] = _lin_bwd(merge(dt), a, params[p + "W" + name])
            da += dai
        dx, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_bwd(da, ln1)
        dh = dh + dx
    if drop_mask is not None:
        dh = dh * drop_mask
    grads["pos_emb"] = dh.sum(0)
    dtok = np.zeros_like(params["tok_emb"])
    np.add.at(dtok, ids, dh)
    grads["tok_emb"] = dtok
    return {name: grads[name] for name in param_names(cfg)}
