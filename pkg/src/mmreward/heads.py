"""Reward heads: skip-connection cross-attention and the linear baseline.

The cross-attention head uses the pooled hidden state as a single query over
the projector's visual tokens (keys and values), then maps the attended
vector to the reward with a linear layer ``g``. The baseline reads the
pooled hidden state alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import gelu, gelu_grad, layernorm, layernorm_backward, softmax
from .errors import ConfigError, NumericError, ShapeError

HEAD_KINDS = ("skipca", "linear", "mlp")


class HeadError(ShapeError):
    pass


@dataclass(frozen=True)
class RewardOutput:
    values: np.ndarray
    mode: str = "scalar"

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values))
        if self.mode == "scalar" and v.shape[-1] != 1:
            raise ConfigError("scalar rewards have exactly one component")
        if self.mode == "embedding" and v.shape[-1] % 2:
            raise ConfigError("preference embeddings need an even dimension")
        if self.mode not in ("scalar", "embedding"):
            raise ConfigError(f"unknown reward mode {self.mode!r}")
        object.__setattr__(self, "values", v)

    @property
    def scalar(self) -> float:
        if self.mode != "scalar":
            raise ConfigError("embedding rewards have no scalar value")
        return float(self.values[..., 0])


def output_mode(out_dim: int) -> str:
    if out_dim == 1:
        return "scalar"
    if out_dim >= 2 and out_dim % 2 == 0:
        return "embedding"
    raise ConfigError(f"reward dimension must be 1 or even, got {out_dim}")


def init_head(kind: str, d_model: int, out_dim: int, rng: np.random.Generator, dtype=np.float32,
              hidden: int | None = None, g_std: float | None = None) -> dict[str, np.ndarray]:
    """Head parameters with ``head.`` prefixes.

    The output map starts at zero for scalar rewards, so every score
    difference is 0 on a fresh model. Embedding heads start with small random
    weights: the preference form is bilinear in the outputs and has a saddle
    at zero.
    """
    mode = output_mode(out_dim)
    if g_std is None:
        g_std = 0.0 if mode == "scalar" else 0.1
    d = d_model
    p: dict[str, np.ndarray] = {}
    if kind == "skipca":
        for name in ("Wq", "Wk", "Wv"):
            p[f"head.{name}"] = rng.normal(0, 1.0 / np.sqrt(d), (d, d))
        p["head.G"] = rng.normal(0, g_std, (out_dim, d)) if g_std else np.zeros((out_dim, d))
        if mode == "scalar":
            p["head.gb"] = np.zeros(out_dim)
    elif kind == "linear":
        p["head.W"] = rng.normal(0, g_std, (out_dim, d)) if g_std else np.zeros((out_dim, d))
        if mode == "scalar":
            p["head.b"] = np.zeros(out_dim)
    elif kind == "mlp":
        hidden = hidden or d
        p["head.W1"] = rng.normal(0, 1.0 / np.sqrt(d), (hidden, d))
        p["head.b1"] = np.zeros(hidden)
        p["head.W2"] = rng.normal(0, g_std, (out_dim, hidden)) if g_std else np.zeros((out_dim, hidden))
        if mode == "scalar":
            p["head.b2"] = np.zeros(out_dim)
    else:
        raise ConfigError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
    return {k: v.astype(dtype) for k, v in p.items()}


def _norm(x):
    return layernorm(x, 1.0, 0.0)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite input to reward head")


def skipca_forward(params, e_h: np.ndarray, e_v: np.ndarray, n_heads: int):
    """Batched cross-attention head.

    ``e_h`` is ``(B, d)``, ``e_v`` is ``(B, n_v, d)``. Returns the ``(B, m)``
    head output and a cache for :func:`skipca_backward`.
    """
    if e_v.ndim != 3 or e_v.shape[1] == 0:
        raise HeadError("cross-attention head needs at least one visual token")
    _check_finite(e_h, e_v)
    B, n, d = e_v.shape
    if d % n_heads:
        raise ConfigError("d_model must be divisible by the head count")
    dh = d // n_heads
    raw_h, raw_v = e_h, e_v
    e_h, ln_h = _norm(e_h)
    e_v, ln_v = _norm(e_v)
    q = (e_h @ params["head.Wq"].T).reshape(B, n_heads, dh)
    k = (e_v @ params["head.Wk"].T).reshape(B, n, n_heads, dh).transpose(0, 2, 1, 3)
    v = (e_v @ params["head.Wv"].T).reshape(B, n, n_heads, dh).transpose(0, 2, 1, 3)
    logits = np.einsum("bhd,bhnd->bhn", q, k) / np.sqrt(dh)
    w = softmax(logits)
    o = np.einsum("bhn,bhnd->bhd", w, v).reshape(B, d)
    out = o @ params["head.G"].T
    if "head.gb" in params:
        out = out + params["head.gb"]
    return out, dict(e_h=e_h, e_v=e_v, q=q, k=k, v=v, w=w, o=o, n_heads=n_heads, ln_h=ln_h, ln_v=ln_v,
                     raw_h=raw_h, raw_v=raw_v)


def skipca_backward(params, d_out: np.ndarray, cache):
    """Returns ``(grads, d_e_h, d_e_v)``."""
    e_h, e_v, q, k, v, w, o = (cache[n] for n in ("e_h", "e_v", "q", "k", "v", "w", "o"))
    H = cache["n_heads"]
    B, n, d = e_v.shape
    dh = d // H
    grads = {"head.G": d_out.T @ o}
    if "head.gb" in params:
        grads["head.gb"] = d_out.sum(0)
    do = (d_out @ params["head.G"]).reshape(B, H, dh)
    dw = np.einsum("bhd,bhnd->bhn", do, v)
    dv = np.einsum("bhn,bhd->bhnd", w, do)
    dlogits = w * (dw - (dw * w).sum(-1, keepdims=True)) / np.sqrt(dh)
    dq = np.einsum("bhn,bhnd->bhd", dlogits, k).reshape(B, d)
    dk = np.einsum("bhn,bhd->bhnd", dlogits, q).transpose(0, 2, 1, 3).reshape(B, n, d)
    dv = dv.transpose(0, 2, 1, 3).reshape(B, n, d)
    grads["head.Wq"] = dq.T @ e_h
    grads["head.Wk"] = np.einsum("bnd,bne->de", dk, e_v)
    grads["head.Wv"] = np.einsum("bnd,bne->de", dv, e_v)
    d_eh = layernorm_backward(dq @ params["head.Wq"], cache["ln_h"])
    d_ev = layernorm_backward(dk @ params["head.Wk"] + dv @ params["head.Wv"], cache["ln_v"])
    return grads, d_eh, d_ev


def attention_weights(params, e_h: np.ndarray, e_v: np.ndarray, n_heads: int) -> np.ndarray:
    """Per-head weights over visual tokens for a single example, ``(H, n_v)``."""
    _, cache = skipca_forward(params, e_h[None], e_v[None], n_heads)
    return cache["w"][0]


def linear_forward(params, e_h: np.ndarray):
    """Affine (``head.W``) or one-hidden-layer (``head.W1``/``head.W2``) map of ``e_h``.

    No normalisation is applied, so the affine head is exactly affine in ``e_h``.
    """
    _check_finite(e_h)
    if "head.W" in params:
        out = e_h @ params["head.W"].T
        if "head.b" in params:
            out = out + params["head.b"]
        return out, dict(e_h=e_h)
    u = e_h @ params["head.W1"].T + params["head.b1"]
    a, t = gelu(u)
    out = a @ params["head.W2"].T
    if "head.b2" in params:
        out = out + params["head.b2"]
    return out, dict(e_h=e_h, u=u, t=t, a=a)


def linear_backward(params, d_out: np.ndarray, cache):
    """Returns ``(grads, d_e_h)``."""
    e_h = cache["e_h"]
    if "head.W" in params:
        grads = {"head.W": d_out.T @ e_h}
        if "head.b" in params:
            grads["head.b"] = d_out.sum(0)
        return grads, d_out @ params["head.W"]
    grads = {"head.W2": d_out.T @ cache["a"]}
    if "head.b2" in params:
        grads["head.b2"] = d_out.sum(0)
    du = (d_out @ params["head.W2"]) * gelu_grad(cache["u"], cache["t"])
    grads["head.W1"] = du.T @ e_h
    grads["head.b1"] = du.sum(0)
    return grads, du @ params["head.W1"]


def head_forward(kind: str, params, e_h, e_v, n_heads: int):
    if kind == "skipca":
        return skipca_forward(params, e_h, e_v, n_heads)
    if kind in ("linear", "mlp"):
        return linear_forward(params, e_h)
    raise ConfigError(f"unknown head kind {kind!r}")


def head_backward(kind: str, params, d_out, cache):
    """Returns ``(grads, d_e_h, d_e_v or None)``."""
    if kind == "skipca":
        return skipca_backward(params, d_out, cache)
    grads, d_eh = linear_backward(params, d_out, cache)
    return grads, d_eh, None
