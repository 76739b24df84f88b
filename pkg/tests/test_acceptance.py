"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the lines are
collected in the "acceptance criteria" section of the terminal summary.
"""
import time

import numpy as np
import pytest
from scipy import stats

import oracles
from conftest import ACCEPTANCE_LINES, tiny_config
from mmreward import backbone as bb
from mmreward.backbone import ModelConfig
from mmreward.cli import dispatch
from mmreward.data import gen_synthetic_corpus, separable_alignment_spec
from mmreward.evaluation import accuracy_without_ties, f1_binary, judge_pairs, kendall_tau, pairwise_acc, pearson
from mmreward.model import RewardModel
from mmreward.objectives import bt_loss, gpm_score_diff, preference_prob, skew_operator
from mmreward.steering import ORACLE_LAMBDA, SteeringConfig, ToyDiffusion, oracle_reward_fn, smc_steer
from mmreward.training import TrainConfig, gradient_check, loss_and_grads, randomize_trainable, train

pytestmark = pytest.mark.slow


def report(n: int, ok: bool, text: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _forced_accuracy(model, pairs, tag="alignment"):
    sc = model.score([p.prompt for p in pairs], [p.chosen for p in pairs], tag)[:, 0]
    sr = model.score([p.rejected_text for p in pairs], [p.rejected for p in pairs], tag)[:, 0]
    return accuracy_without_ties(judge_pairs(sc, sr))


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(2024)
    objectives = ["bt", "gpm", "ce"] * 7
    worst, details = 0.0, []
    t0 = time.perf_counter()
    for i in range(20):
        objective = objectives[i]
        d_model = int(rng.choice([8, 16]))
        cfg = tiny_config(d_model=d_model, n_layers=int(rng.integers(1, 3)), lora_rank=int(rng.integers(1, 4)))
        head = "skipca" if objective == "gpm" and rng.random() < 0.5 else str(rng.choice(["skipca", "linear", "mlp"]))
        out_dim = 2 if objective == "gpm" else 1
        m = RewardModel(cfg, seed=i, dtype=np.float64)
        m.add_perspective("alignment", head=head, out_dim=out_dim,
                          hidden_layer=int(rng.integers(-1, cfg.n_layers + 1)),
                          pooling=str(rng.choice(["eos", "mean"])),
                          visual_layer=int(rng.integers(0, cfg.n_layers + 1)), seed=i)
        randomize_trainable(m, "alignment", rng)
        pairs, bins = gen_synthetic_corpus(i, 3, separable_alignment_spec() if i % 2 else None)
        batch = bins[:4] if objective == "ce" else pairs
        res = gradient_check(m, "alignment", batch, objective, n_samples=50, seed=i)
        details.append(res.max_rel_error)
        worst = max(worst, res.max_rel_error)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    report(1, ok, f"max relative gradient error {worst:.2e} over 20 configs (< 1e-4), {elapsed:.1f}s (< 120s)")
    assert ok, details


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_2_zero_init_anchor():
    m = RewardModel(ModelConfig(), seed=0)
    m.add_perspective("alignment")
    pairs, _ = gen_synthetic_corpus(0, 16, None)
    loss, _ = loss_and_grads(m, "alignment", pairs, "bt")
    err = abs(loss - np.log(2))
    ok = err <= 1e-6
    report(2, ok, f"fresh BT batch loss {loss:.12f}, |loss - ln 2| = {err:.1e} (<= 1e-6)")
    assert ok


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_3_synthetic_end_to_end():
    spec = separable_alignment_spec()
    train_pairs, _ = gen_synthetic_corpus(1, 2000, spec)
    held_out, _ = gen_synthetic_corpus(101, 500, spec)
    t0 = time.perf_counter()
    m = RewardModel(ModelConfig(), seed=1)
    m.add_perspective("alignment", head="skipca", hidden_layer=0, pooling="mean")
    train(m, "alignment", train_pairs, TrainConfig(learning_rate=1e-3, batch_size=8, grad_accum=1, epochs=1, seed=1))
    acc = _forced_accuracy(m, held_out)
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.95 and elapsed < 600
    report(3, ok, f"held-out forced-choice accuracy {acc:.3f} on 500 pairs after 1 epoch on 2000 (>= 0.95), "
                  f"{elapsed:.1f}s (< 600s)")
    assert ok


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_4_skipca_beats_linear():
    # the preferred image is the one whose colour the prompt names; with mean pooling at the
    # projector layer e_h is (prompt tokens + visual tokens) / n, so any affine head scores
    # chosen minus rejected independently of the prompt and cannot beat chance
    spec = separable_alignment_spec()
    acc = {"skipca": [], "linear": []}
    for seed in range(5):
        train_pairs, _ = gen_synthetic_corpus(seed, 2000, spec)
        held_out, _ = gen_synthetic_corpus(1000 + seed, 500, spec)
        for head in acc:
            m = RewardModel(ModelConfig(), seed=seed)
            m.add_perspective("alignment", head=head, hidden_layer=0, pooling="mean", seed=seed)
            train(m, "alignment", train_pairs, TrainConfig(learning_rate=1e-3, batch_size=8, grad_accum=1, seed=seed))
            acc[head].append(_forced_accuracy(m, held_out))
    gap = 100 * (np.mean(acc["skipca"]) - np.mean(acc["linear"]))
    ok = gap >= 5
    report(4, ok, f"SkipCA {100 * np.mean(acc['skipca']):.1f} vs linear {100 * np.mean(acc['linear']):.1f} "
                  f"accuracy over 5 seeds, gap {gap:.1f} points (>= 5)")
    assert ok, acc


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_5_objective_algebra():
    rng = np.random.default_rng(5)
    # antisymmetry, exact on integers
    anti_bad = 0
    for m in (2, 4, 8):
        R = skew_operator(m)
        a = rng.integers(-1000, 1000, (10_000, m)).astype(np.float64)
        b = rng.integers(-1000, 1000, (10_000, m)).astype(np.float64)
        anti_bad += int(np.count_nonzero(gpm_score_diff(a, b, R) != -gpm_score_diff(b, a, R)))
        anti_bad += int(np.count_nonzero(gpm_score_diff(a, a, R) != 0))
    # complementarity within one ulp of 1
    s = rng.normal(0, 10, (2, 1_000_000))
    comp = np.abs(preference_prob(s[0], s[1]) + preference_prob(s[1], s[0]) - 1.0)
    comp_bad = int(np.count_nonzero(comp > np.spacing(1.0)))
    # monotonicity: a larger score gap never gives a larger loss
    mono_bad = 0
    for T in (0.1, 0.5, 1.0, 2.0, 5.0):
        d = np.sort(rng.uniform(-40, 40, (20_000, 2)), axis=1)
        mono_bad += int(np.count_nonzero(bt_loss(d[:, 0], 0.0, T) < bt_loss(d[:, 1], 0.0, T)))
    ok = anti_bad == comp_bad == mono_bad == 0
    report(5, ok, f"antisymmetry violations {anti_bad}/60000, complementarity > 1 ulp {comp_bad}/1e6, "
                  f"monotonicity violations {mono_bad}/1e5")
    assert ok


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    bad = {"kendall_tau": 0, "pairwise_acc": 0, "pearson": 0, "f1_binary": 0}
    worst_pearson = 0.0
    for i in range(100):
        model, human = oracles.random_instance(rng, 50, discrete=bool(i % 2))
        bad["kendall_tau"] += kendall_tau(model, human) != oracles.kendall_tau_b(model, human)
        bad["pairwise_acc"] += pairwise_acc(model, human) != oracles.pairwise_accuracy(model, human)
        e = abs(pearson(model, human) - oracles.pearson(model, human))
        worst_pearson = max(worst_pearson, e)
        bad["pearson"] += e > 1e-12
        n = int(rng.integers(1, 51))
        p, y = rng.random(n) < rng.random(), rng.random(n) < rng.random()
        bad["f1_binary"] += abs(f1_binary(p, y) - oracles.f1(p, y)) > 1e-15
    ok = not any(bad.values())
    report(6, ok, f"oracle mismatches over 100 instances {bad}; worst pearson deviation {worst_pearson:.1e}")
    assert ok


# -- 7 ------------------------------------------------------------------------------------

def test_criterion_7_steering_gain():
    t0 = time.perf_counter()
    proc = ToyDiffusion.four_modes()
    oracle = oracle_reward_fn((2.0, 2.0))
    seeds = range(200)
    one = np.array([smc_steer(proc, SteeringConfig(k=1, lam=ORACLE_LAMBDA, reward_fn=oracle), seed=s).reward
                    for s in seeds])
    four = np.array([smc_steer(proc, SteeringConfig(k=4, lam=ORACLE_LAMBDA, reward_fn=oracle), seed=s).reward
                     for s in seeds])
    gain = (four.mean() - one.mean()) / abs(one.mean())
    p = stats.ttest_rel(four, one).pvalue
    counts = np.zeros(4)
    s = 0
    while counts.sum() < 10_000:
        for idx in smc_steer(proc, SteeringConfig(k=4, lam=0.0, reward_fn=oracle), seed=10_000 + s).ancestors:
            counts += np.bincount(idx, minlength=4)
        s += 1
    chi_p = stats.chisquare(counts).pvalue
    elapsed = time.perf_counter() - t0
    ok = gain >= 0.10 and p < 0.01 and chi_p > 0.01 and elapsed < 300
    report(7, ok, f"mean final reward K=1 {one.mean():.3f} -> K=4 {four.mean():.3f} ({100 * gain:+.1f}%, >= 10%), "
                  f"paired t-test p={p:.1e} (< 0.01); lambda=0 survival chi-square p={chi_p:.3f} over "
                  f"{int(counts.sum())} draws (> 0.01); {elapsed:.1f}s (< 300s)")
    assert ok


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_8_freeze_and_adapter_contracts():
    cfg = ModelConfig()
    m = RewardModel(cfg, seed=8)
    m.add_perspective("alignment", seed=8)
    frozen = {k: v.copy() for k, v in m.weights.items()}
    pairs, _ = gen_synthetic_corpus(8, 1000, None)
    st = train(m, "alignment", pairs, TrainConfig(learning_rate=1e-3, batch_size=2, grad_accum=1, seed=8))
    changed = [k for k in frozen if not np.array_equal(frozen[k], m.weights[k])]
    freeze_ok = st.step == 500 and not changed
    # merged weights vs the dynamic adapter, with the adapter trained above (non-zero B)
    ad = m.adapter("alignment")
    prompts = [p.prompt for p in pairs[:8]]
    images = [p.chosen for p in pairs[:8]]
    batch = m.batch(prompts, images)
    dyn = bb.forward(cfg, m.weights, batch, projector=ad.projector, lora=ad.lora)
    merged = bb.forward(cfg, bb.merge_adapter(m.weights, ad.lora, cfg, "alignment"), batch, projector=ad.projector)
    rel = max(float(np.max(np.abs(x - y)) / np.max(np.abs(x))) for x, y in zip(dyn.hidden, merged.hidden))
    # a fresh (zero-B) adapter leaves every hidden state bitwise equal to the bare body
    m.add_perspective("safety", seed=9)
    base = bb.forward(cfg, m.weights, batch)
    zero = bb.forward(cfg, m.weights, batch, projector=m.adapter("safety").projector, lora=m.adapter("safety").lora)
    zero_ok = all(np.array_equal(x, y) for x, y in zip(base.hidden, zero.hidden))
    ok = freeze_ok and rel <= 1e-6 and zero_ok
    report(8, ok, f"{st.step} steps, frozen tensors changed: {len(changed)}; merge vs dynamic max relative "
                  f"deviation {rel:.1e} (<= 1e-6); zero adapter bitwise equal to base: {zero_ok}")
    assert ok


# -- 9 ------------------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    data = tmp_path / "pairs.jsonl"
    assert dispatch(["gen-data", "--out", str(data), "--n", "64", "--separable", "--seed", "9"]) == 0
    curves, diags = [], []
    for run in ("a", "b"):
        assert dispatch(["train", "--data", str(data), "--perspective", "alignment", "--out",
                         str(tmp_path / f"{run}.npz"), "--loss-curve", str(tmp_path / f"{run}.loss.csv"),
                         "--hidden-layer", "0", "--pooling", "mean", "--lr", "2e-3", "--grad-accum", "1",
                         "--seed", "9"]) == 0
        curves.append((tmp_path / f"{run}.loss.csv").read_bytes())
        assert dispatch(["steer", "--oracle", "2", "2", "--seeds", "5", "--seed", "9",
                         "--out", str(tmp_path / f"{run}.steer.csv")]) == 0
        diags.append((tmp_path / f"{run}.steer.csv").read_bytes())
    ok = curves[0] == curves[1] and diags[0] == diags[1] and len(curves[0]) > 0 and len(diags[0]) > 0
    report(9, ok, f"train loss curves identical: {curves[0] == curves[1]} ({len(curves[0])} bytes); "
                  f"steer diagnostics identical: {diags[0] == diags[1]} ({len(diags[0])} bytes)")
    assert ok
