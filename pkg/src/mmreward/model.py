"""Frozen body + per-perspective adapters and reward heads, with checkpoints."""
from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backbone as bb
from ._io import atomic_write_bytes
from .data import Perspective, SyntheticImage, TextPrompt
from .errors import CheckpointError, ConfigError
from .heads import RewardOutput, head_backward, head_forward, init_head, output_mode

CHECKPOINT_VERSION = 1


class RewardModel:
    """A multimodal reward model: one frozen body shared by all perspectives.

    Each registered perspective owns a projector copy, LoRA factors and a
    head. The body weights are never modified by training or activation.
    """

    def __init__(self, config: bb.ModelConfig | None = None, weights: bb.Weights | None = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config or bb.ModelConfig()
        self.rng = np.random.default_rng(seed)
        self.weights = weights if weights is not None else bb.init_weights(self.config, self.rng, dtype)
        self.registry = bb.AdapterRegistry()

    @property
    def dtype(self):
        return self.weights["tok_emb"].dtype

    # -- registry ---------------------------------------------------------------
    def add_perspective(self, tag, head: str = "skipca", out_dim: int = 1, hidden_layer: int = -1,
                        pooling: str = "eos", visual_layer: int = 0, head_heads: int | None = None,
                        seed: int | None = None) -> bb.PerspectiveAdapter:
        tag = Perspective.parse(tag).value
        output_mode(out_dim)
        cfg = self.config
        if pooling not in bb.POOLINGS:
            raise ConfigError(f"unknown pooling {pooling!r}")
        if not -1 <= hidden_layer <= cfg.n_layers:
            raise ConfigError(f"hidden_layer {hidden_layer} out of range")
        if not 0 <= visual_layer <= cfg.n_layers:
            raise ConfigError(f"visual_layer {visual_layer} out of range")
        head_heads = head_heads or cfg.n_heads
        if cfg.d_model % head_heads:
            raise ConfigError("d_model must be divisible by the head's head count")
        rng = self.rng if seed is None else np.random.default_rng(seed)
        params = {"proj.W": self.weights["proj.W"].copy(), "proj.b": self.weights["proj.b"].copy()}
        params.update(bb.init_lora(cfg, rng, self.dtype))
        params.update(init_head(head, cfg.d_model, out_dim, rng, self.dtype))
        ad = bb.PerspectiveAdapter(params, head, out_dim, hidden_layer, pooling, visual_layer, head_heads)
        self.registry.register(tag, ad)
        return ad

    def adapter(self, tag=None) -> bb.PerspectiveAdapter:
        tag = self.registry.active if tag is None else tag
        if tag is None:
            raise ConfigError("no perspective given and none active")
        return self.registry.get(tag)

    def activate(self, tag) -> None:
        self.registry.activate(tag)

    def deactivate(self) -> None:
        self.registry.deactivate()

    def resolve_layer(self, layer: int) -> int:
        return self.config.n_layers if layer == -1 else layer

    # -- body -------------------------------------------------------------------
    def batch(self, prompts: Sequence[TextPrompt], images: Sequence[SyntheticImage]) -> bb.Batch:
        return bb.make_batch(prompts, images, self.config, self.dtype)

    def forward(self, prompt: TextPrompt, image: SyntheticImage, adapter=None, layer: int = -1) -> bb.HiddenStates:
        """Single-example body pass with the given (or active) adapter, or the bare body."""
        tag = adapter if adapter is not None else self.registry.active
        ad = self.registry.get(tag) if tag is not None else None
        batch = self.batch([prompt], [image])
        res = bb.forward(self.config, self.weights, batch,
                         projector=ad.projector if ad else None, lora=ad.lora if ad else None)
        layer = self.resolve_layer(layer)
        if not 0 <= layer <= self.config.n_layers:
            raise IndexError(f"layer {layer} out of range")
        eos = int(batch.eos_pos[0])
        layers = [h[0] for h in res.hidden]
        return bb.HiddenStates(layers, eos, layers[layer][eos], res.visual_tokens[0], layer)

    # -- reward path ------------------------------------------------------------
    def run(self, batch: bb.Batch, tag=None, params: dict | None = None):
        """Head outputs ``(B, m)`` plus everything needed for :meth:`backprop`."""
        ad = self.adapter(tag)
        p = ad.params if params is None else params
        lora = {k: v for k, v in p.items() if k.startswith("lora.")}
        proj = {k: v for k, v in p.items() if k.startswith("proj.")}
        L = self.resolve_layer(ad.hidden_layer)
        depth = max(L, ad.visual_layer if ad.head_kind == "skipca" else 0)
        res = bb.forward(self.config, self.weights, batch, projector=proj, lora=lora, depth=depth)
        e_h = bb.pool(res.hidden[L], batch.eos_pos, ad.pooling)
        n_v = self.config.n_visual
        e_v = None
        if ad.head_kind == "skipca":
            e_v = res.visual_tokens if ad.visual_layer == 0 else res.hidden[ad.visual_layer][:, :n_v]
        out, hcache = head_forward(ad.head_kind, p, e_h, e_v, ad.head_heads)
        return out, dict(ad=ad, params=p, lora=lora, batch=batch, res=res, L=L, hcache=hcache)

    def backprop(self, d_out: np.ndarray, cache) -> dict:
        """Gradients of ``sum(d_out * out)`` w.r.t. every trainable tensor."""
        ad, p, batch, res = cache["ad"], cache["params"], cache["batch"], cache["res"]
        hgrads, d_eh, d_ev = head_backward(ad.head_kind, p, d_out, cache["hcache"])
        L = cache["L"]
        d_hidden = {L: bb.pool_backward(d_eh, res.hidden[L].shape, batch.eos_pos, ad.pooling)}
        d_visual = None
        if d_ev is not None:
            if ad.visual_layer == 0:
                d_visual = d_ev
            else:
                g = np.zeros_like(res.hidden[ad.visual_layer])
                g[:, :self.config.n_visual] = d_ev
                vl = ad.visual_layer
                d_hidden[vl] = d_hidden[vl] + g if vl in d_hidden else g
        grads, _ = bb.backward(self.config, self.weights, batch, res, d_hidden, d_visual, lora=cache["lora"])
        grads.update(hgrads)
        return grads

    def score(self, prompts: Sequence[TextPrompt], images: Sequence[SyntheticImage], tag=None,
              chunk: int = 256) -> np.ndarray:
        """Head outputs ``(B, m)`` in float64."""
        outs = []
        for i in range(0, len(prompts), chunk):
            out, _ = self.run(self.batch(prompts[i:i + chunk], images[i:i + chunk]), tag)
            outs.append(out.astype(np.float64))
        return np.concatenate(outs) if outs else np.zeros((0, self.adapter(tag).out_dim))

    def reward(self, prompt: TextPrompt, image: SyntheticImage, tag=None) -> RewardOutput:
        ad = self.adapter(tag)
        return RewardOutput(self.score([prompt], [image], tag)[0], ad.mode)

    # -- bookkeeping --------------------------------------------------------------
    def astype(self, dtype) -> "RewardModel":
        m = RewardModel(self.config, self.weights.astype(dtype))
        for tag, ad in self.registry.items():
            m.registry.register(tag, bb.PerspectiveAdapter({k: v.astype(dtype) for k, v in ad.params.items()},
                                                           **ad.settings()))
        m.registry.active = self.registry.active
        return m

    def parameter_counts(self, tag=None) -> dict:
        base = sum(v.size for k, v in self.weights.items())
        trainable = sum(v.size for v in self.adapter(tag).params.values())
        return {"base": base, "trainable": trainable, "total": base + trainable,
                "fraction": trainable / (base + trainable)}


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(model: RewardModel, path) -> None:
    """``.npz`` container: JSON metadata plus base and per-perspective arrays."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "merged": list(model.weights.merged),
        "adapters": {tag: ad.settings() for tag, ad in model.registry.items()},
    }
    arrays = {f"base/{k}": v for k, v in model.weights.items()}
    for tag, ad in model.registry.items():
        arrays.update({f"adapter/{tag}/{k}": v for k, v in ad.params.items()})
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path, expected_config: bb.ModelConfig | None = None) -> RewardModel:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
    config = bb.ModelConfig.from_dict(meta["config"])
    if config.config_hash() != meta["config_hash"]:
        raise CheckpointError("checkpoint config hash does not match its stored config")
    if expected_config is not None and expected_config.config_hash() != meta["config_hash"]:
        raise CheckpointError(
            f"checkpoint config hash {meta['config_hash']} != expected {expected_config.config_hash()}")
    weights = bb.Weights({k[5:]: v for k, v in arrays.items() if k.startswith("base/")},
                         merged=meta.get("merged", ()))
    model = RewardModel(config, weights)
    for tag, settings in meta["adapters"].items():
        prefix = f"adapter/{tag}/"
        params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        model.registry.register(tag, bb.PerspectiveAdapter(params, **settings))
    return model
