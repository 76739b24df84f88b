"""Fine-tuning loop for one perspective and a finite-difference gradient check.

Only the perspective's projector copy, LoRA factors and head are updated;
the body weights are read-only throughout.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._io import atomic_write_text
from .data import BinaryExample, PairExample
from .errors import ConfigError, NumericError
from .model import RewardModel
from .objectives import bt_loss, bt_loss_grad, ce_grad, ce_terms, gpm_score_diff, gpm_score_diff_grad, skew_operator

OBJECTIVES = ("bt", "gpm", "ce")
CONFIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    grad_accum: int = 4
    epochs: int = 1
    objective: str = "bt"
    seed: int = 0
    temperature: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 1:
            raise ConfigError("batch_size, grad_accum and epochs must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError("temperature must be positive")

    def to_dict(self) -> dict:
        return {"schema_version": CONFIG_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported train config schema_version {version}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def trainable_params(model: RewardModel, perspective) -> dict[str, np.ndarray]:
    """The live trainable tensors of one perspective (projector, LoRA, head)."""
    return model.adapter(perspective).params


def check_objective(model: RewardModel, perspective, objective: str) -> None:
    mode = model.adapter(perspective).mode
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    need = "embedding" if objective == "gpm" else "scalar"
    if mode != need:
        raise ConfigError(f"objective {objective!r} needs a {need} head, perspective has a {mode} head")


def _legs(examples, objective):
    """Flatten a batch into (prompts, images) plus what the loss needs."""
    if objective in ("bt", "gpm"):
        if not all(isinstance(e, PairExample) for e in examples):
            raise ConfigError(f"objective {objective!r} needs PairExample records")
        prompts = [e.prompt for e in examples] + [e.rejected_text for e in examples]
        images = [e.chosen for e in examples] + [e.rejected for e in examples]
        return prompts, images, None
    prompts, images, labels = [], [], []
    for e in examples:
        if isinstance(e, BinaryExample):
            prompts.append(e.prompt)
            images.append(e.image)
            labels.append(e.label)
        else:
            prompts += [e.prompt, e.rejected_text]
            images += [e.chosen, e.rejected]
            labels += [True, False]
    return prompts, images, np.array(labels)


def _check_perspective(examples) -> None:
    tags = {e.perspective for e in examples}
    if len(tags) > 1:
        raise ConfigError(f"batch mixes perspectives {sorted(t.value for t in tags)}")


def loss_and_grads(model: RewardModel, perspective, examples: Sequence, objective: str = "bt",
                   temperature: float = 1.0, params: dict | None = None) -> tuple[float, dict]:
    """Mean loss over the batch and its gradient for every trainable tensor."""
    if not examples:
        raise ConfigError("empty batch")
    check_objective(model, perspective, objective)
    prompts, images, labels = _legs(examples, objective)
    out, cache = model.run(model.batch(prompts, images), perspective, params=params)
    out64 = out.astype(np.float64)
    d_out = np.zeros_like(out64)
    if objective == "ce":
        s = out64[:, 0]
        loss = float(ce_terms(s, labels).mean())
        d_out[:, 0] = ce_grad(s, labels) / len(s)
    else:
        B = len(examples)
        if objective == "bt":
            diff = out64[:B, 0] - out64[B:, 0]
            g = bt_loss_grad(diff, temperature) / B
            d_out[:B, 0] = g
            d_out[B:, 0] = -g
        else:
            R = skew_operator(out64.shape[1])
            diff = gpm_score_diff(out64[:B], out64[B:], R)
            g = bt_loss_grad(diff, temperature) / B
            gc, gr = gpm_score_diff_grad(out64[:B], out64[B:], R)
            d_out[:B] = g[:, None] * gc
            d_out[B:] = g[:, None] * gr
        loss = float(bt_loss(diff, 0.0, temperature).mean())
    grads = model.backprop(d_out.astype(out.dtype), cache)
    return loss, grads


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= upd.astype(params[k].dtype)


@dataclass
class TrainState:
    optimizer: Adam
    step: int = 0
    micro_step: int = 0
    accum: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        return cls(Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps))


def train_step(model: RewardModel, perspective, batch: Sequence, state: TrainState,
               config: TrainConfig) -> tuple[TrainState, float]:
    """Forward/backward one micro-batch; update every ``grad_accum`` micro-steps."""
    _check_perspective(batch)
    loss, grads = loss_and_grads(model, perspective, batch, config.objective, config.temperature)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
        scaled = g / config.grad_accum
        state.accum[k] = state.accum[k] + scaled if k in state.accum else scaled
    state.micro_step += 1
    state.history.append((state.micro_step, state.step, loss))
    if state.micro_step % config.grad_accum == 0:
        state.optimizer.step(trainable_params(model, perspective), state.accum)
        state.accum = {}
        state.step += 1
    return state, loss


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train(model: RewardModel, perspective, data: Sequence, config: TrainConfig,
          state: TrainState | None = None, callback: Callable | None = None) -> TrainState:
    if not data:
        raise ConfigError("no training data")
    check_objective(model, perspective, config.objective)
    state = state or TrainState.fresh(config)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        for idx in iterate_batches(len(data), config.batch_size, rng):
            state, loss = train_step(model, perspective, [data[i] for i in idx], state, config)
            if callback is not None:
                callback(state, loss)
    return state


def loss_curve_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["micro_step", "optimizer_step", "loss"])
    for micro, step, loss in history:
        w.writerow([micro, step, repr(float(loss))])
    return buf.getvalue()


def write_loss_curve(history, path) -> None:
    atomic_write_text(path, loss_curve_csv(history))


# -- gradient check -------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: str
    analytic: np.ndarray
    numeric: np.ndarray


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def gradient_check(model: RewardModel, perspective, batch: Sequence, objective: str = "bt",
                   epsilon: float = 1e-5, n_samples: int = 50, seed: int = 0, temperature: float = 1.0,
                   grad_fn: Callable | None = None) -> GradCheckResult:
    """Compare analytic gradients with central differences on sampled scalars.

    ``grad_fn(model, perspective, batch, objective, temperature)`` overrides
    the analytic path (used to check that the harness catches bad
    gradients). The model must hold float64 parameters.
    """
    if model.dtype != np.float64:
        raise ConfigError("gradient_check needs a float64 model (use model.astype(np.float64))")
    if not 1e-6 <= epsilon <= 1e-3:
        raise ConfigError("epsilon must lie in [1e-6, 1e-3]")
    grad_fn = grad_fn or (lambda m, p, b, o, t: loss_and_grads(m, p, b, o, t))
    _, grads = grad_fn(model, perspective, batch, objective, temperature)
    params = trainable_params(model, perspective)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite analytic gradient for {k}")
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = np.arange(total) if total <= n_samples else np.sort(rng.choice(total, n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric, labels = [], [], []
    for fi in flat_idx:
        j = int(np.searchsorted(offsets, fi, side="right") - 1)
        k = names[j]
        local = int(fi - offsets[j])
        arr = params[k].reshape(-1)
        orig = arr[local]
        arr[local] = orig + epsilon
        lp, _ = loss_and_grads(model, perspective, batch, objective, temperature)
        arr[local] = orig - epsilon
        lm, _ = loss_and_grads(model, perspective, batch, objective, temperature)
        arr[local] = orig
        num = (lp - lm) / (2 * epsilon)
        if not np.isfinite(num):
            raise NumericError(f"non-finite numeric gradient for {k}[{local}]")
        numeric.append(num)
        analytic.append(grads[k].reshape(-1)[local] if k in grads else 0.0)
        labels.append(f"{k}[{local}]")
    analytic, numeric = np.array(analytic), np.array(numeric)
    err = relative_error(analytic, numeric)
    worst = int(np.argmax(err))
    return GradCheckResult(float(err[worst]), len(flat_idx), labels[worst], analytic, numeric)


def randomize_trainable(model: RewardModel, perspective, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Overwrite zero-initialised factors with noise so every gradient path is live."""
    for k, v in trainable_params(model, perspective).items():
        if k.endswith(".B") or k in ("head.G", "head.gb", "head.W", "head.b", "head.W2", "head.b2"):
            v[...] = rng.normal(0, scale, v.shape).astype(v.dtype)
