"""Preference objectives.

All losses use the softplus form so they stay finite for large score gaps;
``softplus(x) = log(1 + e^x)`` is evaluated with ``np.logaddexp``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import BinaryExample, Perspective
from .errors import ConfigError, LabelingError, ShapeError


def softplus(x):
    return np.logaddexp(0.0, x)


def _check_temperature(T: float) -> None:
    if not (np.isfinite(T) and T > 0):
        raise ConfigError(f"temperature must be positive and finite, got {T!r}")


@dataclass(frozen=True)
class PreferenceScore:
    value: float
    temperature: float = 1.0

    def __post_init__(self):
        _check_temperature(self.temperature)


def bt_loss(s_c, s_r, T: float = 1.0):
    """Bradley-Terry ranking loss ``-log sigmoid((s_c - s_r) / T)``, elementwise."""
    _check_temperature(T)
    return softplus((np.asarray(s_r, dtype=np.float64) - s_c) / T)


def bt_loss_grad(diff, T: float = 1.0):
    """d loss / d diff for ``diff = s_c - s_r``."""
    _check_temperature(T)
    return -expit(-np.asarray(diff) / T) / T


def skew_operator(m: int = 2) -> np.ndarray:
    """Block-diagonal ``[[0, -1], [1, 0]]`` operator of even size ``m``."""
    if m < 2 or m % 2:
        raise ConfigError(f"skew operator needs an even dimension, got {m}")
    R = np.zeros((m, m))
    for i in range(0, m, 2):
        R[i, i + 1] = -1.0
        R[i + 1, i] = 1.0
    return R


@dataclass(frozen=True)
class SkewOperator:
    matrix: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.matrix, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] % 2:
            raise ConfigError("skew operator must be a square matrix of even size")
        if not np.array_equal(R, -R.T):
            raise ConfigError("operator is not skew-symmetric")
        object.__setattr__(self, "matrix", R)

    @classmethod
    def default(cls, m: int = 2) -> "SkewOperator":
        return cls(skew_operator(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _as_operator(R) -> np.ndarray:
    if R is None:
        return skew_operator(2)
    if isinstance(R, SkewOperator):
        return R.matrix
    return SkewOperator(R).matrix


def gpm_score_diff(r_c, r_r, R=None):
    """``<R r_c, r_r>`` over the last axis."""
    R = _as_operator(R)
    r_c = np.asarray(r_c, dtype=np.float64)
    r_r = np.asarray(r_r, dtype=np.float64)
    m = R.shape[0]
    if r_c.shape[-1] != m or r_r.shape[-1] != m:
        raise ShapeError(f"embeddings of size {r_c.shape[-1]}/{r_r.shape[-1]} do not match operator size {m}")
    return np.einsum("...i,...i->...", r_c @ R.T, r_r)


def gpm_score_diff_grad(r_c, r_r, R=None):
    """Gradients of the score difference w.r.t. ``r_c`` and ``r_r``."""
    R = _as_operator(R)
    return np.asarray(r_r) @ R, np.asarray(r_c) @ R.T


def ce_terms(scores, labels):
    """Per-example ``-log sigmoid(s)`` (label true) or ``-log(1 - sigmoid(s))``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in shape")
    return np.where(y, softplus(-s), softplus(s))


def ce_loss(s_chosen=None, s_rejected=None) -> float:
    """Mean cross-entropy over the present terms.

    Chosen scores are labelled true and rejected scores false; either side
    may be absent for unpaired data.
    """
    terms = []
    if s_chosen is not None:
        terms.append(np.atleast_1d(ce_terms(s_chosen, np.ones(np.shape(s_chosen), bool))))
    if s_rejected is not None:
        terms.append(np.atleast_1d(ce_terms(s_rejected, np.zeros(np.shape(s_rejected), bool))))
    if not terms:
        raise ConfigError("ce_loss needs at least one score")
    return float(np.concatenate(terms).mean())


def ce_grad(scores, labels):
    """d term / d s = sigmoid(s) - label."""
    return expit(np.asarray(scores, dtype=np.float64)) - np.asarray(labels, dtype=np.float64)


def preference_prob(s_c, s_r):
    """``sigmoid(s_c - s_r)`` built so that ``P(a, b) + P(b, a)`` rounds to 1."""
    d = np.asarray(s_c, dtype=np.float64) - np.asarray(s_r, dtype=np.float64)
    lo = expit(-np.abs(d))
    p = np.where(d < 0, lo, 1.0 - lo)
    p = np.clip(p, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))
    return p if p.ndim else float(p)


def cross_prompt_label(scored: Sequence[tuple], perspective=Perspective.OVERALL) -> list[BinaryExample]:
    """Binary labels from a split at the global median of human scores.

    ``scored`` holds ``(prompt, image, score)`` triples drawn from any number
    of prompts. Scores above the median become true, below become false,
    and scores equal to the median are dropped.
    """
    if len(scored) < 2:
        raise LabelingError("need at least two scored examples")
    scores = np.array([float(s) for *_, s in scored])
    if np.all(scores == scores[0]):
        raise LabelingError("all scores identical; no median split possible")
    med = np.median(scores)
    out = []
    for (prompt, image, _), s in zip(scored, scores):
        if s != med:
            out.append(BinaryExample(prompt, image, bool(s > med), Perspective.parse(perspective)))
    return out
