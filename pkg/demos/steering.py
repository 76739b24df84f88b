"""Reward-steered sampling on the four-mode toy process.

Part 1 uses the analytic reward -||x - (2, 2)||^2 and sweeps the particle
count. Part 2 trains a small colour-alignment reward model, paints each
mode of the toy process in its own colour, and steers with the learned
reward toward the colour the prompt names.

    python demos/steering.py
"""
import time

import numpy as np

from mmreward import (ModelConfig, RewardModel, SteeringConfig, TextPrompt, ToyDiffusion, TrainConfig,
                      gen_synthetic_corpus, separable_alignment_spec, train)
from mmreward.steering import LEARNED_LAMBDA, ORACLE_LAMBDA, model_reward_fn, oracle_reward_fn, smc_steer

SEEDS = range(100)
COLORS = ("red", "green", "blue", "yellow")


def oracle_sweep(process):
    print("analytic reward, target (2, 2), lambda =", ORACLE_LAMBDA)
    fn = oracle_reward_fn((2.0, 2.0))
    for k in (1, 2, 4, 8):
        finals = [smc_steer(process, SteeringConfig(k=k, lam=ORACLE_LAMBDA, reward_fn=fn), seed=s).reward
                  for s in SEEDS]
        print(f"  K={k}: mean final reward {np.mean(finals):8.3f}")


def nearest_mode(process, samples):
    d = ((np.asarray(samples)[:, None, :] - process.means) ** 2).sum(-1)
    return d.argmin(1)


def learned_reward(process):
    print("\ntraining a colour-alignment reward model ...")
    t0 = time.perf_counter()
    pairs, _ = gen_synthetic_corpus(0, 2000, separable_alignment_spec())
    model = RewardModel(ModelConfig(), seed=0)
    model.add_perspective("alignment", head="skipca", hidden_layer=0, pooling="mean")
    train(model, "alignment", pairs, TrainConfig(learning_rate=1e-3, batch_size=8, grad_accum=1))
    print(f"  done in {time.perf_counter() - t0:.1f}s")
    fn = model_reward_fn(model, "alignment", process, COLORS)
    for word in ("red", "blue"):
        prompt = TextPrompt.from_text(f"one {word} square")
        want = COLORS.index(word)
        print(f"prompt {prompt.raw!r} (mode {want} at {process.means[want]}), lambda = {LEARNED_LAMBDA}")
        for k in (1, 4):
            cfg = SteeringConfig(k=k, lam=LEARNED_LAMBDA, reward_fn=fn)
            samples = [smc_steer(process, cfg, prompt, seed=s).sample for s in range(40)]
            hit = np.mean(nearest_mode(process, samples) == want)
            print(f"  K={k}: {100 * hit:5.1f}% of samples land in the {word} mode")


if __name__ == "__main__":
    proc = ToyDiffusion.four_modes()
    oracle_sweep(proc)
    learned_reward(proc)
