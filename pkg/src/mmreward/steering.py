"""Reward-guided sampling with a particle system on a toy denoising process.

The toy process is a variance-exploding diffusion whose clean distribution is
an isotropic Gaussian mixture, so every conditional it needs is available in
closed form: at noise level ``s`` the marginal of each component is
``N(mu_k, (tau^2 + s^2) I)``, and the exact reverse (ancestral) step from
``s_t`` to ``s_{t+1}`` picks a component by its posterior responsibility and
then draws from a Gaussian.

:func:`smc_steer` runs ``K`` particles through that sampler. After every step
each particle's log-weight grows by ``lambda * (r_t - r_{t-1})``, where ``r_t``
is the reward of the particle's predicted clean sample, and the population
is resampled multinomially. The highest-reward final particle is returned.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from ._io import atomic_write_text
from .data import BACKGROUND, COLORS, SyntheticImage, TextPrompt, shape_mask
from .errors import ConfigError, NumericError

RESAMPLE_RULES = ("every_step", "ess_threshold")
ORACLE_LAMBDA = 10.0
LEARNED_LAMBDA = 60.0


def default_schedule(n_steps: int = 30, s_max: float = 10.0, s_min: float = 0.02) -> np.ndarray:
    """Geometric noise levels ``s_0 > ... > s_{N-1}`` followed by ``s_N = 0``."""
    if n_steps < 1:
        raise ConfigError("need at least one step")
    return np.append(np.geomspace(s_max, s_min, n_steps), 0.0)


@dataclass(frozen=True)
class ToyDiffusion:
    """Variance-exploding process over a Gaussian-mixture clean distribution.

    ``schedule`` holds ``N + 1`` noise levels, non-increasing and ending at 0;
    step ``t`` moves from ``schedule[t]`` to ``schedule[t + 1]``.
    """
    means: np.ndarray
    tau: float = 0.5
    schedule: np.ndarray = field(default_factory=default_schedule)
    weights: np.ndarray | None = None

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        s = np.asarray(self.schedule, dtype=np.float64).ravel()
        w = np.full(len(mu), 1.0 / len(mu)) if self.weights is None else np.asarray(self.weights, np.float64)
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if s.size < 2:
            raise ConfigError("schedule needs at least two levels (N >= 1)")
        if np.any(s < 0) or np.any(np.diff(s) > 0) or s[-1] != 0:
            raise ConfigError("noise levels must be non-negative, non-increasing and end at 0")
        if w.shape != (len(mu),) or np.any(w <= 0) or not np.isclose(w.sum(), 1.0):
            raise ConfigError("mixture weights must be positive and sum to 1")
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "schedule", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def four_modes(cls, spread: float = 2.0, tau: float = 0.5, n_steps: int = 30) -> "ToyDiffusion":
        """Equal-weight modes at ``(+-spread, +-spread)``."""
        m = spread * np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
        return cls(m, tau, default_schedule(n_steps))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_steps(self) -> int:
        return self.schedule.size - 1

    def _check_t(self, t: int, upper: int) -> None:
        if not 0 <= t <= upper:
            raise ConfigError(f"step {t} outside [0, {upper}]")

    def responsibilities(self, x: np.ndarray, t: int) -> np.ndarray:
        """Posterior component probabilities given the state at step ``t``; ``(..., M)``."""
        var = self.tau ** 2 + self.schedule[t] ** 2
        d2 = ((np.asarray(x, np.float64)[..., None, :] - self.means) ** 2).sum(-1)
        logp = np.log(self.weights) - 0.5 * d2 / var
        e = np.exp(logp - logp.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)

    def sample_initial(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Draw from the noisy marginal at ``s_0``."""
        return self._sample_marginal(rng, self.schedule[0], n)

    def sample_target(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Closed-form draw from the clean mixture."""
        return self._sample_marginal(rng, 0.0, n)

    def _sample_marginal(self, rng, s, n):
        shape = () if n is None else (n,)
        k = rng.choice(len(self.means), size=shape, p=self.weights)
        sd = np.sqrt(self.tau ** 2 + s ** 2)
        return self.means[k] + sd * rng.standard_normal(shape + (self.dim,))

    def denoise_step(self, state: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
        """Exact ancestral step from level ``t`` to ``t + 1`` for one state ``(d,)``."""
        self._check_t(t, self.n_steps - 1)
        x = np.asarray(state, np.float64)
        s0, s1 = self.schedule[t], self.schedule[t + 1]
        tau2 = self.tau ** 2
        r = self.responsibilities(x, t)
        k = min(int(np.searchsorted(np.cumsum(r), rng.random(), side="right")), len(r) - 1)
        shrink = (tau2 + s1 ** 2) / (tau2 + s0 ** 2)
        # written as a pull toward the mode so that shrink == 1 leaves x bit-identical
        mean = x - (1.0 - shrink) * (x - self.means[k])
        var = (tau2 + s1 ** 2) * (s0 ** 2 - s1 ** 2) / (tau2 + s0 ** 2)
        return mean + np.sqrt(var) * rng.standard_normal(self.dim)

    def predict_terminal(self, state: np.ndarray, t: int) -> np.ndarray:
        """Posterior mean of the clean sample given the state at step ``t``."""
        self._check_t(t, self.n_steps)
        x = np.asarray(state, np.float64)
        tau2 = self.tau ** 2
        shrink = tau2 / (tau2 + self.schedule[t] ** 2)
        r = self.responsibilities(x, t)
        comp = x[..., None, :] - (1.0 - shrink) * (x[..., None, :] - self.means)
        return (r[..., None] * comp).sum(-2)

    def ancestral_sample(self, rng: np.random.Generator) -> np.ndarray:
        """One unsteered trajectory's terminal state."""
        x = self.sample_initial(rng)
        for t in range(self.n_steps):
            x = self.denoise_step(x, t, rng)
        return x


# -- rewards ----------------------------------------------------------------------

def distance_reward(samples: np.ndarray, target) -> np.ndarray:
    """Analytic oracle ``r(x) = -||x - target||^2``."""
    return -((np.asarray(samples) - np.asarray(target, np.float64)) ** 2).sum(-1)


def oracle_reward_fn(target) -> Callable:
    target = np.asarray(target, np.float64)
    return lambda samples, prompt=None: distance_reward(samples, target)


def render_state(process: ToyDiffusion, x: np.ndarray, colors: Sequence[str], size: int = 16,
                 cell: int = 4, shape: str = "square") -> SyntheticImage:
    """Paint a 2-D state as an image: one shape whose colour blends the palette.

    Component ``k`` of the mixture owns ``colors[k]``; the blend weights are the
    state's clean-level responsibilities, so states near a mode render in
    that mode's colour.
    """
    if len(colors) != len(process.means):
        raise ConfigError("need one colour per mixture component")
    r = process.responsibilities(x, process.n_steps)
    rgb = r @ np.array([COLORS[c] for c in colors])
    img = np.full((size, size, 3), BACKGROUND)
    m = shape_mask(shape, cell)
    y0 = x0 = (size - cell) // 2
    img[y0:y0 + cell, x0:x0 + cell][m] = rgb
    return SyntheticImage(img.astype(np.float32), {"state": [float(v) for v in x]})


def model_reward_fn(model, perspective, process: ToyDiffusion, colors: Sequence[str]) -> Callable:
    """Score rendered states with a trained reward model's scalar head."""
    def fn(samples, prompt: TextPrompt):
        images = [render_state(process, x, colors) for x in np.atleast_2d(samples)]
        return model.score([prompt] * len(images), images, perspective)[:, 0]
    return fn


# -- particle steering ---------------------------------------------------------------

@dataclass(frozen=True)
class SteeringConfig:
    k: int = 4
    lam: float = ORACLE_LAMBDA
    resample_rule: str = "every_step"
    ess_fraction: float = 0.5
    reward_fn: Callable | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("particle count must be >= 1")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError("lambda must be finite and >= 0")
        if self.resample_rule not in RESAMPLE_RULES:
            raise ConfigError(f"resample_rule must be one of {RESAMPLE_RULES}")
        if not 0 < self.ess_fraction <= 1:
            raise ConfigError("ess_fraction must lie in (0, 1]")


@dataclass
class Particle:
    state: np.ndarray
    log_weight: float = 0.0
    last_reward: float = 0.0


@dataclass
class SteeringResult:
    sample: np.ndarray
    reward: float
    particles: list
    ess: np.ndarray          # per step, before resampling
    mean_reward: np.ndarray
    max_reward: np.ndarray
    resampled: np.ndarray    # bool per step
    ancestors: list          # index arrays, one per resampling event

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "ess", "mean_reward", "max_reward", "resampled"])
        for t in range(len(self.ess)):
            w.writerow([t + 1, repr(float(self.ess[t])), repr(float(self.mean_reward[t])),
                        repr(float(self.max_reward[t])), int(self.resampled[t])])
        return buf.getvalue()

    def write_diagnostics(self, path) -> None:
        atomic_write_text(path, self.diagnostics_csv())


def normalized_weights(log_w: np.ndarray) -> np.ndarray:
    log_w = np.asarray(log_w, np.float64)
    if not np.all(np.isfinite(log_w)):
        raise NumericError("non-finite particle log-weight")
    return np.exp(log_w - logsumexp(log_w))


def effective_sample_size(log_w: np.ndarray) -> float:
    w = normalized_weights(log_w)
    return float(1.0 / np.dot(w, w))


def multinomial_resample(log_w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices drawn i.i.d. from the normalised weights, sorted ascending."""
    w = normalized_weights(log_w)
    return np.sort(rng.choice(len(w), size=len(w), p=w))


def particle_streams(seed, k: int) -> tuple[list[np.random.Generator], np.random.Generator]:
    """``k`` independent particle generators plus one for resampling, all from ``seed``.

    Particle ``0``'s stream is the first child of the seed, which is also
    what :func:`ancestral_stream` hands to an unsteered run with that seed.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    kids = ss.spawn(k + 1)
    return [np.random.default_rng(c) for c in kids[:k]], np.random.default_rng(kids[k])


def ancestral_stream(seed) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.default_rng(ss.spawn(1)[0])


def smc_steer(process: ToyDiffusion, config: SteeringConfig, prompt=None, seed=0) -> SteeringResult:
    """Steer ``config.k`` particles toward high reward; see the module docstring.

    ``prompt`` is passed to the reward function untouched (a target point for
    the oracle, a :class:`TextPrompt` for a learned model). Every random draw
    comes from streams derived from ``seed``.
    """
    if config.reward_fn is None:
        raise ConfigError("steering needs a reward function")
    K, lam = config.k, config.lam
    rngs, rs_rng = particle_streams(seed, K)

    def rewards(states, t):
        r = np.asarray(config.reward_fn(process.predict_terminal(states, t), prompt), np.float64).reshape(K)
        if not np.all(np.isfinite(r)):
            raise NumericError("reward function returned a non-finite value")
        return r

    x = np.stack([process.sample_initial(g) for g in rngs])
    r_prev = rewards(x, 0)
    log_w = np.zeros(K)
    N = process.n_steps
    ess, mean_r, max_r, resampled, ancestors = [], [], [], [], []
    for t in range(N):
        x = np.stack([process.denoise_step(x[i], t, rngs[i]) for i in range(K)])
        r = rewards(x, t + 1)
        log_w = log_w + lam * (r - r_prev)
        # keep the weights centred; log-space makes underflow impossible
        log_w = log_w - log_w.max()
        r_prev = r
        e = effective_sample_size(log_w)
        ess.append(e)
        mean_r.append(float(r.mean()))
        max_r.append(float(r.max()))
        last = t == N - 1
        do = not last and (config.resample_rule == "every_step" or e < config.ess_fraction * K)
        resampled.append(do)
        if do:
            idx = multinomial_resample(log_w, rs_rng)
            ancestors.append(idx)
            x, r_prev = x[idx], r_prev[idx]
            log_w = np.zeros(K)
    best = int(np.argmax(r_prev))
    particles = [Particle(x[i].copy(), float(log_w[i]), float(r_prev[i])) for i in range(K)]
    return SteeringResult(x[best].copy(), float(r_prev[best]), particles, np.array(ess), np.array(mean_r),
                          np.array(max_r), np.array(resampled), ancestors)
