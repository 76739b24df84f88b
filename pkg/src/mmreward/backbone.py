"""Toy decoder-only multimodal transformer with low-rank adapters.

Sequence layout is ``[visual tokens; text tokens; EOS; padding]``. Visual
tokens come from a linear patch projector. Blocks are pre-LayerNorm with
causal multi-head attention and a GELU MLP. Low-rank adapters attach to the
query, value and MLP up-projections.

Everything is plain numpy. ``forward`` keeps the activations needed by
``backward``, which returns gradients for the trainable tensors only
(projector and adapter factors) plus the gradient reaching the projector
output.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import EOS_ID, PAD_ID, SyntheticImage, TextPrompt
from .errors import ConfigError, RegistryError, SequenceLengthError, ShapeError

LN_EPS = 1e-5
GELU_K = np.sqrt(2.0 / np.pi)
LORA_TARGETS = ("q", "v", "up")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 256
    patch_size: int = 4
    max_seq: int = 64
    lora_rank: int = 8
    lora_scale: float = 1.0
    mlp_ratio: int = 4
    image_height: int = 16
    image_width: int = 16
    image_channels: int = 3
    max_prompt_len: int = 16

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be a positive multiple of n_heads")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.patch_size < 1 or self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError("image dims must be divisible by patch_size")
        if self.max_seq < self.n_visual + self.max_prompt_len + 1:
            raise ConfigError("max_seq must hold the visual tokens, the longest prompt and EOS")

    @property
    def n_visual(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels

    @property
    def d_ff(self) -> int:
        return self.mlp_ratio * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Weights(dict):
    """Name -> array mapping for the frozen body.

    ``merged`` records adapters folded in by :func:`merge_adapter`.
    """

    def __init__(self, *args, merged: Sequence[str] = (), **kwargs):
        super().__init__(*args, **kwargs)
        self.merged = tuple(merged)

    def copy(self) -> "Weights":
        return Weights({k: v.copy() for k, v in self.items()}, merged=self.merged)

    def astype(self, dtype) -> "Weights":
        return Weights({k: v.astype(dtype) for k, v in self.items()}, merged=self.merged)


def layer_keys(l: int) -> list[str]:
    return [f"L{l}.{n}" for n in ("ln1.g", "ln1.b", "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
                                  "ln2.g", "ln2.b", "W1", "b1", "W2", "b2")]


def init_weights(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Weights:
    d, dff = config.d_model, config.d_ff
    w: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0, 1.0, (config.vocab_size, d)),
        "pos_emb": rng.normal(0, 0.1, (config.max_seq, d)),
        "proj.W": rng.normal(0, 1.0 / np.sqrt(config.patch_dim), (d, config.patch_dim)),
        "proj.b": np.zeros(d),
    }
    for l in range(config.n_layers):
        p = f"L{l}."
        w[p + "ln1.g"] = np.ones(d)
        w[p + "ln1.b"] = np.zeros(d)
        w[p + "ln2.g"] = np.ones(d)
        w[p + "ln2.b"] = np.zeros(d)
        for name in ("Wq", "Wk", "Wv", "Wo"):
            w[p + name] = rng.normal(0, 1.0 / np.sqrt(d), (d, d))
        for name in ("bq", "bk", "bv", "bo"):
            w[p + name] = np.zeros(d)
        w[p + "W1"] = rng.normal(0, 1.0 / np.sqrt(d), (dff, d))
        w[p + "b1"] = np.zeros(dff)
        w[p + "W2"] = rng.normal(0, 1.0 / np.sqrt(dff), (d, dff))
        w[p + "b2"] = np.zeros(d)
    return Weights({k: v.astype(dtype) for k, v in w.items()})


def lora_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """``{target: (out, in)}`` for every adapted matrix of one layer."""
    d = config.d_model
    return {"q": (d, d), "v": (d, d), "up": (config.d_ff, d)}


def init_lora(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Factors named ``lora.L{l}.{target}.A`` / ``.B``; B starts at zero."""
    r = config.lora_rank
    out = {}
    for l in range(config.n_layers):
        for t, (fo, fi) in lora_shapes(config).items():
            out[f"lora.L{l}.{t}.A"] = rng.normal(0, 1.0 / np.sqrt(fi), (r, fi)).astype(dtype)
            out[f"lora.L{l}.{t}.B"] = np.zeros((fo, r), dtype=dtype)
    return out


def lora_delta(A: np.ndarray, B: np.ndarray, scale: float) -> np.ndarray:
    return scale * (B @ A)


_TARGET_WEIGHT = {"q": "Wq", "v": "Wv", "up": "W1"}


def merge_adapter(weights: Weights, adapter: Mapping[str, np.ndarray], config: ModelConfig,
                  name: str = "adapter") -> Weights:
    """Fold ``scale * B @ A`` into the base matrices and return new weights."""
    if name in weights.merged:
        raise ConfigError(f"adapter {name!r} is already merged into these weights")
    merged = weights.copy()
    for l in range(config.n_layers):
        for t in LORA_TARGETS:
            A = adapter.get(f"lora.L{l}.{t}.A")
            B = adapter.get(f"lora.L{l}.{t}.B")
            if A is None or B is None:
                raise ShapeError(f"adapter is missing factors for layer {l} target {t}")
            key = f"L{l}.{_TARGET_WEIGHT[t]}"
            delta = lora_delta(A, B, config.lora_scale)
            if delta.shape != merged[key].shape:
                raise ShapeError(f"{key}: adapter delta {delta.shape} vs weight {merged[key].shape}")
            merged[key] = (merged[key] + delta).astype(merged[key].dtype)
    merged.merged = weights.merged + (name,)
    return merged


# -- inputs -----------------------------------------------------------------------

def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """``(..., H, W, C)`` -> ``(..., n_patches, patch*patch*C)``, row-major patches."""
    *lead, H, W, C = pixels.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {patch}")
    x = pixels.reshape(*lead, H // patch, patch, W // patch, patch, C)
    x = np.moveaxis(x, -3, -4)  # (..., H/p, W/p, p, p, C)
    return x.reshape(*lead, (H // patch) * (W // patch), patch * patch * C)


def _check_image(config: ModelConfig, pixels: np.ndarray) -> None:
    expect = (config.image_height, config.image_width, config.image_channels)
    if pixels.shape[-3:] != expect:
        raise ShapeError(f"image shape {pixels.shape[-3:]} does not match model {expect}")


def encode_image(image: SyntheticImage | np.ndarray, projector: Mapping[str, np.ndarray],
                 config: ModelConfig) -> np.ndarray:
    """Visual tokens ``(n_v, d_model)`` for one image."""
    px = image.pixels if isinstance(image, SyntheticImage) else np.asarray(image)
    _check_image(config, px)
    W = projector["proj.W"]
    return patchify(px.astype(W.dtype), config.patch_size) @ W.T + projector["proj.b"]


@dataclass
class Batch:
    patches: np.ndarray   # (B, n_v, patch_dim)
    ids: np.ndarray       # (B, T) text ids, EOS after each prompt, then PAD
    eos_pos: np.ndarray   # (B,) absolute EOS position in the sequence

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def make_batch(prompts: Sequence[TextPrompt], images: Sequence[SyntheticImage | np.ndarray],
               config: ModelConfig, dtype=np.float32) -> Batch:
    if len(prompts) != len(images) or not prompts:
        raise ShapeError("need equally many (>= 1) prompts and images")
    lens = [len(p.tokens) for p in prompts]
    if min(lens) < 1:
        raise ShapeError("empty prompt")
    longest = max(lens)
    if config.n_visual + longest + 1 > config.max_seq:
        raise SequenceLengthError(
            f"sequence of {config.n_visual} visual + {longest} text + EOS exceeds max_seq {config.max_seq}")
    for p in prompts:
        if max(p.tokens) >= config.vocab_size or min(p.tokens) < 0:
            raise ShapeError(f"token id out of range for prompt {p.raw!r}")
    ids = np.full((len(prompts), longest + 1), PAD_ID, dtype=np.int64)
    for i, p in enumerate(prompts):
        ids[i, :lens[i]] = p.tokens
        ids[i, lens[i]] = EOS_ID
    px = np.stack([im.pixels if isinstance(im, SyntheticImage) else np.asarray(im) for im in images])
    _check_image(config, px)
    patches = patchify(px.astype(dtype), config.patch_size)
    return Batch(patches, ids, config.n_visual + np.asarray(lens))


# -- primitives ---------------------------------------------------------------------

def layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    return inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))


def gelu(u):
    t = np.tanh(GELU_K * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3 * 0.044715 * u * u)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _split(x, H):
    B, S, d = x.shape
    return x.reshape(B, S, H, d // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, S, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, H * dh)


def _adapted(h, W, b, lora, scale):
    y = h @ W.T + b
    if lora is None:
        return y, None
    A, B = lora
    z = h @ A.T
    return y + scale * (z @ B.T), z


# -- forward / backward -------------------------------------------------------------

@dataclass
class ForwardResult:
    hidden: list[np.ndarray]      # n_layers + 1 arrays of (B, S, d)
    visual_tokens: np.ndarray     # (B, n_v, d), projector output
    eos_pos: np.ndarray
    attn: list[np.ndarray]        # per layer (B, H, S, S)
    caches: list

    @property
    def n_layers(self) -> int:
        return len(self.hidden) - 1


def _layer_lora(lora, l):
    if lora is None:
        return {}
    return {t: (lora[f"lora.L{l}.{t}.A"], lora[f"lora.L{l}.{t}.B"]) for t in LORA_TARGETS}


def forward(config: ModelConfig, weights: Mapping[str, np.ndarray], batch: Batch,
            projector: Mapping[str, np.ndarray] | None = None,
            lora: Mapping[str, np.ndarray] | None = None, depth: int | None = None) -> ForwardResult:
    """Run the body and keep every layer's activations.

    ``projector`` defaults to the base projector in ``weights``; ``lora`` is a
    flat ``lora.L{l}.{target}.{A,B}`` mapping or None for the plain body.
    ``depth`` stops after that many blocks (``hidden`` then has ``depth + 1``
    entries); callers that read a shallow layer skip the rest.
    """
    depth = config.n_layers if depth is None else depth
    if not 0 <= depth <= config.n_layers:
        raise ValueError(f"depth {depth} out of range")
    proj = projector if projector is not None else weights
    Wp, bp = proj["proj.W"], proj["proj.b"]
    B, n_v = batch.patches.shape[:2]
    S = n_v + batch.ids.shape[1]
    if S > config.max_seq:
        raise SequenceLengthError(f"sequence length {S} exceeds max_seq {config.max_seq}")
    ev = batch.patches @ Wp.T + bp
    x = np.concatenate([ev, weights["tok_emb"][batch.ids]], axis=1) + weights["pos_emb"][:S]
    hidden, attn, caches = [x], [], []
    H, dh = config.n_heads, config.head_dim
    mask = np.triu(np.ones((S, S), dtype=bool), 1)
    s = config.lora_scale
    for l in range(depth):
        p = f"L{l}."
        ll = _layer_lora(lora, l)
        h1, ln1 = layernorm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        q, zq = _adapted(h1, weights[p + "Wq"], weights[p + "bq"], ll.get("q"), s)
        k = h1 @ weights[p + "Wk"].T + weights[p + "bk"]
        v, zv = _adapted(h1, weights[p + "Wv"], weights[p + "bv"], ll.get("v"), s)
        qh, kh, vh = _split(q, H), _split(k, H), _split(v, H)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
        scores = np.where(mask, -np.inf, scores)
        P = softmax(scores)
        o = _merge(P @ vh)
        x2 = x + o @ weights[p + "Wo"].T + weights[p + "bo"]
        h2, ln2 = layernorm(x2, weights[p + "ln2.g"], weights[p + "ln2.b"])
        u, zu = _adapted(h2, weights[p + "W1"], weights[p + "b1"], ll.get("up"), s)
        a, t = gelu(u)
        x = x2 + a @ weights[p + "W2"].T + weights[p + "b2"]
        hidden.append(x)
        attn.append(P)
        caches.append(dict(h1=h1, ln1=ln1, qh=qh, kh=kh, vh=vh, P=P, o=o, h2=h2, ln2=ln2,
                           u=u, t=t, a=a, zq=zq, zv=zv, zu=zu))
    return ForwardResult(hidden, ev, batch.eos_pos, attn, caches)


def _lora_backward(dy, h, z, A, B, s, grads, prefix):
    """Accumulate dA, dB for ``y += s * (h A^T) B^T`` and return the input gradient."""
    dz = s * (dy @ B)
    grads[prefix + ".B"] = s * np.einsum("bso,bsr->or", dy, z)
    grads[prefix + ".A"] = np.einsum("bsr,bsi->ri", dz, h)
    return dz @ A


def backward(config: ModelConfig, weights: Mapping[str, np.ndarray], batch: Batch, res: ForwardResult,
             d_hidden: Mapping[int, np.ndarray], d_visual: np.ndarray | None = None,
             lora: Mapping[str, np.ndarray] | None = None) -> tuple[dict, np.ndarray]:
    """Backpropagate gradients on hidden states down to the trainable tensors.

    ``d_hidden`` maps layer index to ``dL/dhidden[layer]``; ``d_visual`` is an
    extra gradient on the projector output. Returns ``(grads, d_ev)`` where
    ``grads`` holds ``proj.*`` and (if ``lora``) ``lora.*`` entries.
    """
    grads: dict[str, np.ndarray] = {}
    top = max(d_hidden) if d_hidden else 0
    g = d_hidden.get(top)
    g = np.zeros_like(res.hidden[0]) if g is None else g.copy()
    H, dh = config.n_heads, config.head_dim
    s = config.lora_scale
    for l in range(top - 1, -1, -1):
        p = f"L{l}."
        c = res.caches[l]
        ll = _layer_lora(lora, l)
        # MLP
        da = g @ weights[p + "W2"]
        du = da * gelu_grad(c["u"], c["t"])
        dh2 = du @ weights[p + "W1"]
        if "up" in ll:
            dh2 += _lora_backward(du, c["h2"], c["zu"], *ll["up"], s, grads, f"lora.L{l}.up")
        dx2 = g + layernorm_backward(dh2, c["ln2"])
        # attention
        do = _split(dx2 @ weights[p + "Wo"], H)
        P = c["P"]
        dP = do @ c["vh"].transpose(0, 1, 3, 2)
        dvh = P.transpose(0, 1, 3, 2) @ do
        dscores = P * (dP - (dP * P).sum(-1, keepdims=True)) / np.sqrt(dh)
        dq = _merge(dscores @ c["kh"])
        dk = _merge(dscores.transpose(0, 1, 3, 2) @ c["qh"])
        dv = _merge(dvh)
        dh1 = dq @ weights[p + "Wq"] + dk @ weights[p + "Wk"] + dv @ weights[p + "Wv"]
        if "q" in ll:
            dh1 += _lora_backward(dq, c["h1"], c["zq"], *ll["q"], s, grads, f"lora.L{l}.q")
        if "v" in ll:
            dh1 += _lora_backward(dv, c["h1"], c["zv"], *ll["v"], s, grads, f"lora.L{l}.v")
        g = dx2 + layernorm_backward(dh1, c["ln1"])
        if l in d_hidden:
            g = g + d_hidden[l]
    n_v = batch.patches.shape[1]
    d_ev = g[:, :n_v]
    if d_visual is not None:
        d_ev = d_ev + d_visual
    grads["proj.W"] = np.einsum("bnd,bnp->dp", d_ev, batch.patches)
    grads["proj.b"] = d_ev.sum((0, 1))
    if lora is not None:
        # layers above the deepest read-out get no signal
        for key in lora:
            grads.setdefault(key, np.zeros_like(lora[key]))
    return grads, d_ev


# -- pooling ------------------------------------------------------------------------

POOLINGS = ("eos", "mean")


def pool(hidden: np.ndarray, eos_pos: np.ndarray, pooling: str = "eos") -> np.ndarray:
    """``(B, S, d)`` -> ``(B, d)`` by EOS pick or mean over non-padding positions."""
    B = hidden.shape[0]
    if pooling == "eos":
        return hidden[np.arange(B), eos_pos]
    if pooling == "mean":
        keep = np.arange(hidden.shape[1])[None, :] <= eos_pos[:, None]
        return (hidden * keep[..., None]).sum(1) / (eos_pos + 1)[:, None].astype(hidden.dtype)
    raise ConfigError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


def pool_backward(d_out: np.ndarray, shape: tuple, eos_pos: np.ndarray, pooling: str = "eos") -> np.ndarray:
    B, S, d = shape
    g = np.zeros(shape, dtype=d_out.dtype)
    if pooling == "eos":
        g[np.arange(B), eos_pos] = d_out
    else:
        keep = (np.arange(S)[None, :] <= eos_pos[:, None]).astype(d_out.dtype)
        g = keep[..., None] * (d_out / (eos_pos + 1)[:, None].astype(d_out.dtype))[:, None, :]
    return g


# -- single-example view ------------------------------------------------------------

@dataclass
class HiddenStates:
    layers: list[np.ndarray]   # n_layers + 1 arrays of (seq_len, d)
    eos_position: int
    eos_hidden: np.ndarray
    visual_tokens: np.ndarray
    layer: int

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1


def extract_hidden(states: HiddenStates, layer: int, pooling: str = "eos") -> np.ndarray:
    """One ``d_model`` vector from a chosen layer."""
    if not 0 <= layer <= states.n_layers:
        raise IndexError(f"layer {layer} out of range [0, {states.n_layers}]")
    h = states.layers[layer][None]
    return pool(h, np.array([states.eos_position]), pooling)[0]


# -- registry ------------------------------------------------------------------------

@dataclass
class PerspectiveAdapter:
    """Per-perspective trainable state: projector copy, LoRA factors and head.

    ``params`` is flat with ``proj.``, ``lora.`` and ``head.`` prefixes.
    """

    params: dict
    head_kind: str = "skipca"
    out_dim: int = 1
    hidden_layer: int = -1
    pooling: str = "eos"
    visual_layer: int = 0
    head_heads: int = 0

    @property
    def projector(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("proj.")}

    @property
    def lora(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("lora.")}

    @property
    def head(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("head.")}

    @property
    def mode(self) -> str:
        return "scalar" if self.out_dim == 1 else "embedding"

    def settings(self) -> dict:
        return {"head_kind": self.head_kind, "out_dim": self.out_dim, "hidden_layer": self.hidden_layer,
                "pooling": self.pooling, "visual_layer": self.visual_layer, "head_heads": self.head_heads}


class AdapterRegistry:
    """Perspective name -> adapter, with at most one active at a time."""

    def __init__(self):
        self._adapters: dict[str, PerspectiveAdapter] = {}
        self.active: str | None = None

    def __contains__(self, tag) -> bool:
        return _tag(tag) in self._adapters

    def __iter__(self):
        return iter(self._adapters)

    def __len__(self):
        return len(self._adapters)

    def register(self, tag, adapter: PerspectiveAdapter) -> None:
        self._adapters[_tag(tag)] = adapter

    def get(self, tag) -> PerspectiveAdapter:
        try:
            return self._adapters[_tag(tag)]
        except KeyError:
            raise RegistryError(f"no adapter registered for perspective {_tag(tag)!r}") from None

    def activate(self, tag) -> None:
        self.get(tag)
        self.active = _tag(tag)

    def deactivate(self) -> None:
        self.active = None

    def items(self):
        return self._adapters.items()


def _tag(tag) -> str:
    return getattr(tag, "value", tag)
