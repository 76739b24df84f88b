"""Ranking and classification metrics for reward models.

Pair judgments are three-way (chosen / rejected / tie). A model predicts a
tie when its preference probability lies within ``tie_eps`` of one half.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, RewardModelError
from .objectives import preference_prob

CHOSEN, REJECTED, TIE = "chosen", "rejected", "tie"
OUTCOMES = (CHOSEN, REJECTED, TIE)
DEFAULT_TIE_EPS = 0.05


class UndefinedMetricError(RewardModelError, ValueError):
    """Raised when a metric has no defined value (empty input, zero variance)."""


def judge_pair(s_c: float, s_r: float, tie_eps: float = DEFAULT_TIE_EPS) -> str:
    """Three-way verdict on a scored pair.

    Tie iff ``|P(c > r) - 0.5| <= tie_eps``, otherwise the higher score wins.
    With ``tie_eps = 0`` only exactly equal scores tie.
    """
    if not tie_eps >= 0:
        raise ConfigError(f"tie_eps must be >= 0, got {tie_eps!r}")
    p = preference_prob(s_c, s_r)
    if abs(p - 0.5) <= tie_eps:
        return TIE
    return CHOSEN if s_c > s_r else REJECTED


@dataclass(frozen=True)
class PairJudgment:
    """A predicted verdict next to the reference verdict.

    When the two scores are kept, the forced (tie-free) decision can be
    recomputed regardless of the band used for ``predicted``.
    """
    predicted: str
    ground_truth: str = CHOSEN
    s_c: float | None = None
    s_r: float | None = None

    def __post_init__(self):
        for v in (self.predicted, self.ground_truth):
            if v not in OUTCOMES:
                raise ConfigError(f"judgment must be one of {OUTCOMES}, got {v!r}")

    @property
    def forced(self) -> str:
        if self.s_c is None or self.s_r is None:
            return self.predicted
        return judge_pair(self.s_c, self.s_r, 0.0)


def judge_pairs(s_c: Sequence[float], s_r: Sequence[float], tie_eps: float = DEFAULT_TIE_EPS,
                ground_truth: str | Sequence[str] = CHOSEN) -> list[PairJudgment]:
    """Judge parallel score arrays; ``ground_truth`` is one label or one per pair."""
    s_c = np.asarray(s_c, dtype=np.float64).ravel()
    s_r = np.asarray(s_r, dtype=np.float64).ravel()
    if s_c.shape != s_r.shape:
        raise ConfigError("chosen and rejected score arrays differ in length")
    truth = [ground_truth] * len(s_c) if isinstance(ground_truth, str) else list(ground_truth)
    if len(truth) != len(s_c):
        raise ConfigError("ground truth length does not match the scores")
    return [PairJudgment(judge_pair(c, r, tie_eps), t, float(c), float(r))
            for c, r, t in zip(s_c, s_r, truth)]


def accuracy_with_ties(judgments: Iterable[PairJudgment]) -> float:
    """Exact three-way match rate over all pairs."""
    js = list(judgments)
    if not js:
        raise UndefinedMetricError("no judgments")
    return sum(j.predicted == j.ground_truth for j in js) / len(js)


def accuracy_without_ties(judgments: Iterable[PairJudgment]) -> float:
    """Binary match rate of forced decisions, over pairs where neither side is a tie."""
    js = list(judgments)
    if not js:
        raise UndefinedMetricError("no judgments")
    kept = [(j.forced, j.ground_truth) for j in js]
    kept = [(f, g) for f, g in kept if f != TIE and g != TIE]
    if not kept:
        raise UndefinedMetricError("every pair is a tie; forced accuracy is undefined")
    return sum(f == g for f, g in kept) / len(kept)


# -- scored lists -----------------------------------------------------------------

@dataclass(frozen=True)
class ScoredList:
    """Parallel model and human scores for one ranking problem."""
    model: np.ndarray
    human: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.model, dtype=np.float64).ravel()
        h = np.asarray(self.human, dtype=np.float64).ravel()
        if m.shape != h.shape:
            raise ConfigError(f"model and human scores differ in length ({m.size} vs {h.size})")
        if m.size < 2:
            raise UndefinedMetricError("need at least two scored items")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(h))):
            raise ConfigError("scores must be finite")
        object.__setattr__(self, "model", m)
        object.__setattr__(self, "human", h)


def _scored(data, human=None) -> ScoredList:
    if isinstance(data, ScoredList):
        return data
    if human is None:
        data, human = data
    return ScoredList(data, human)


def pearson(data, human=None) -> float:
    """Product-moment correlation of model and human scores."""
    s = _scored(data, human)
    x = s.model - s.model.mean()
    y = s.human - s.human.mean()
    sxx, syy = np.dot(x, x), np.dot(y, y)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("correlation undefined for a constant score list")
    r = np.dot(x, y) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def _pair_signs(v: np.ndarray, i: int) -> np.ndarray:
    # signs of v[i] - v[j] for j > i
    return np.sign(v[i] - v[i + 1:])


def _pair_counts(s: ScoredList) -> dict:
    """Integer pair counts over all ``i < j`` (one row at a time, O(n) memory)."""
    n = s.model.size
    conc = disc = tie_m = tie_h = model_tie_h_distinct = 0
    for i in range(n - 1):
        sm = _pair_signs(s.model, i)
        sh = _pair_signs(s.human, i)
        prod = sm * sh
        conc += int(np.count_nonzero(prod > 0))
        disc += int(np.count_nonzero(prod < 0))
        tie_m += int(np.count_nonzero(sm == 0))
        tie_h += int(np.count_nonzero(sh == 0))
        model_tie_h_distinct += int(np.count_nonzero((sm == 0) & (sh != 0)))
    return dict(n0=n * (n - 1) // 2, concordant=conc, discordant=disc, tie_model=tie_m, tie_human=tie_h,
                model_tie_human_distinct=model_tie_h_distinct)


def kendall_tau(data, human=None) -> float:
    """Kendall's tau-b: ``(C - D) / sqrt((n0 - T_model)(n0 - T_human))``."""
    c = _pair_counts(_scored(data, human))
    denom = (c["n0"] - c["tie_model"]) * (c["n0"] - c["tie_human"])
    if denom == 0:
        raise UndefinedMetricError("tau-b undefined when either list is constant")
    return float((c["concordant"] - c["discordant"]) / np.sqrt(denom))


def pairwise_acc(data, human=None) -> float:
    """Concordant fraction over pairs with distinct human scores; model ties earn 0.5."""
    c = _pair_counts(_scored(data, human))
    m = c["n0"] - c["tie_human"]
    if m == 0:
        raise UndefinedMetricError("no pair has distinct human scores")
    return (c["concordant"] + 0.5 * c["model_tie_human_distinct"]) / m


def f1_binary(predictions: Sequence[bool], labels: Sequence[bool]) -> float:
    """F1 on the positive class; 0.0 when precision + recall is zero."""
    p = np.asarray(predictions, dtype=bool).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if p.shape != y.shape:
        raise ConfigError("predictions and labels differ in length")
    if p.size == 0:
        raise UndefinedMetricError("no predictions")
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    # 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN); zero TP gives 0 either way
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


METRICS = ("accuracy_with_ties", "accuracy_without_ties", "pearson", "kendall_tau", "pairwise_acc", "f1")
