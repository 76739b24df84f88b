import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmreward.data import CorpusSpec, Perspective, gen_scored_corpus
from mmreward.errors import ConfigError, LabelingError, ShapeError
from mmreward.objectives import (PreferenceScore, SkewOperator, bt_loss, bt_loss_grad, ce_grad, ce_loss, ce_terms,
                                 cross_prompt_label, gpm_score_diff, gpm_score_diff_grad, preference_prob,
                                 skew_operator)

mpmath.mp.dps = 40


def _mp_softplus(x):
    return float(mpmath.log(1 + mpmath.e ** mpmath.mpf(x)))


def _mp_sigmoid(x):
    return float(1 / (1 + mpmath.e ** (-mpmath.mpf(x))))


# -- Bradley-Terry ----------------------------------------------------------------------

@pytest.mark.parametrize("T", [0.1, 1.0, 7.0])
def test_bt_equal_scores_is_ln2(T):
    assert bt_loss(0.4, 0.4, T) == pytest.approx(np.log(2), abs=1e-15)


def test_bt_unit_margin_matches_high_precision():
    for T in (0.5, 1.0, 3.0):
        assert bt_loss(1.0 + T, 1.0, T) == pytest.approx(_mp_softplus(-1), rel=1e-14)
    assert _mp_softplus(-1) == pytest.approx(0.313262, abs=1e-6)


def test_bt_saturates_without_overflow():
    v = bt_loss(50.0, 0.0, 1.0)
    assert np.isfinite(v) and 0 < v < 1e-20
    assert np.isfinite(bt_loss(-1e3, 1e3, 1.0))


@pytest.mark.parametrize("T", [0.0, -1.0, np.inf, np.nan])
def test_bt_rejects_bad_temperature(T):
    with pytest.raises(ConfigError):
        bt_loss(1.0, 0.0, T)
    with pytest.raises(ConfigError):
        PreferenceScore(0.3, T)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.05, 20), st.floats(0.05, 20))
def test_bt_order_independent_of_temperature(d1, d2, T1, T2):
    a = np.sign(bt_loss(d1, 0.0, T1) - bt_loss(d2, 0.0, T1))
    b = np.sign(bt_loss(d1, 0.0, T2) - bt_loss(d2, 0.0, T2))
    if a != 0 and b != 0:
        assert a == b == np.sign(d2 - d1)
    # strictly positive wherever exp(-d/T) is representable (float64 underflows past ~745)
    if d1 / T1 < 700:
        assert bt_loss(d1, 0.0, T1) > 0


def test_bt_grad_finite_difference():
    d = np.linspace(-4, 4, 17)
    h = 1e-6
    num = (bt_loss(d + h, 0.0, 2.0) - bt_loss(d - h, 0.0, 2.0)) / (2 * h)
    np.testing.assert_allclose(bt_loss_grad(d, 2.0), num, rtol=1e-7, atol=1e-10)


# -- GPM ---------------------------------------------------------------------------------

def test_gpm_hand_case_and_identities():
    R = SkewOperator.default()
    np.testing.assert_array_equal(R.matrix, [[0, -1], [1, 0]])
    assert gpm_score_diff([1, 0], [0, 1], R) == 1.0
    x = np.array([0.3, -1.7])
    assert gpm_score_diff(x, x) == 0.0
    a, b = np.array([2.0, 5.0]), np.array([-3.0, 1.0])
    assert gpm_score_diff(a, b) == -gpm_score_diff(b, a)


def test_gpm_block_operator_and_validation():
    R = skew_operator(4)
    assert np.array_equal(R, -R.T)
    with pytest.raises(ConfigError):
        skew_operator(3)
    with pytest.raises(ConfigError):
        SkewOperator(np.eye(2))
    with pytest.raises(ShapeError):
        gpm_score_diff(np.zeros(4), np.zeros(4))


def test_gpm_grad_matches_finite_difference():
    rng = np.random.default_rng(0)
    R = skew_operator(4)
    a, b = rng.normal(size=4), rng.normal(size=4)
    ga, gb = gpm_score_diff_grad(a, b, R)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        assert ga[i] == pytest.approx((gpm_score_diff(a + e, b, R) - gpm_score_diff(a - e, b, R)) / (2 * h), rel=1e-6)
        assert gb[i] == pytest.approx((gpm_score_diff(a, b + e, R) - gpm_score_diff(a, b - e, R)) / (2 * h), rel=1e-6)


# -- cross-entropy -------------------------------------------------------------------------

def test_ce_examples():
    assert ce_loss(0.0) == pytest.approx(np.log(2))
    assert ce_loss(None, 0.0) == pytest.approx(np.log(2))
    t = ce_terms(np.array([50.0]), np.array([True]))[0]
    assert np.isfinite(t) and 0 < t < 1e-20
    assert ce_loss(None, 3.0) == pytest.approx(_mp_softplus(3), rel=1e-14)
    assert _mp_softplus(3) == pytest.approx(3.048587, abs=1e-6)
    with pytest.raises(ConfigError):
        ce_loss()


def test_ce_is_mean_of_terms():
    sc, sr = np.array([0.5, -1.0]), np.array([2.0])
    want = np.mean([_mp_softplus(-0.5), _mp_softplus(1.0), _mp_softplus(2.0)])
    assert ce_loss(sc, sr) == pytest.approx(want, rel=1e-14)


def test_ce_grad_sign_and_value():
    s = np.linspace(-5, 5, 11)
    for lab in (True, False):
        y = np.full(s.shape, lab)
        g = ce_grad(s, y)
        h = 1e-6
        num = (ce_terms(s + h, y) - ce_terms(s - h, y)) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-10)
        assert np.all(np.sign(g) == np.sign(1 / (1 + np.exp(-s)) - lab))


def test_losses_finite_over_stability_range():
    x = np.linspace(-1e3, 1e3, 101)
    assert np.all(np.isfinite(bt_loss(x, -x)))
    assert np.all(np.isfinite(ce_terms(x, x > 0)))
    assert np.all(np.isfinite(ce_terms(x, x < 0)))


# -- preference probability -------------------------------------------------------------------

def test_preference_prob_examples():
    assert preference_prob(0.7, 0.7) == 0.5
    assert preference_prob(1.0, 0.0) == pytest.approx(_mp_sigmoid(1), rel=1e-15)
    assert preference_prob(1.0, 0.0) == pytest.approx(0.731059, abs=1e-6)
    assert preference_prob(0.0, 1.0) == pytest.approx(0.268941, abs=1e-6)


def test_preference_prob_inside_unit_interval():
    p = preference_prob(np.array([1e3, -1e3, 40.0]), np.array([-1e3, 1e3, 0.0]))
    assert np.all(p > 0) and np.all(p < 1)


@settings(max_examples=300, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100))
def test_preference_prob_complement_and_order(a, b):
    p, q = preference_prob(a, b), preference_prob(b, a)
    assert abs((p + q) - 1.0) <= np.spacing(1.0)
    # sigmoid(d) rounds to exactly 0.5 for |d| below ~1e-16
    if abs(a - b) > 1e-15:
        assert (p > 0.5) == (a > b)
    else:
        assert p == 0.5 or (p > 0.5) == (a > b)


# -- cross-prompt labelling -----------------------------------------------------------------------

def _triples(scores):
    data = gen_scored_corpus(0, len(scores), CorpusSpec())
    return [(p, im, s) for (p, im, _), s in zip(data, scores)]


def test_median_split_example():
    out = cross_prompt_label(_triples([1, 2, 3, 4]))
    assert [b.label for b in out] == [False, False, True, True]
    assert all(b.perspective is Perspective.OVERALL for b in out)


def test_exact_median_dropped():
    out = cross_prompt_label(_triples([1, 2, 3]))
    assert [b.label for b in out] == [False, True]


def test_identical_scores_rejected():
    with pytest.raises(LabelingError):
        cross_prompt_label(_triples([5, 5, 5]))
    with pytest.raises(LabelingError):
        cross_prompt_label(_triples([5]))


def test_label_counts_match_sort_oracle():
    rng = np.random.default_rng(0)
    scores = list(np.round(rng.normal(size=100), 1))
    out = cross_prompt_label(_triples(scores))
    s = sorted(scores)
    med = (s[49] + s[50]) / 2
    assert sum(b.label for b in out) == sum(x > med for x in scores)
    assert sum(not b.label for b in out) == sum(x < med for x in scores)
