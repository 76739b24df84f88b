"""Reward-head ablation on the colour-alignment task.

The chosen image is the one whose object has the colour the prompt names.
With mean pooling over the projector-layer sequence, e_h is the average of
prompt tokens and visual tokens, so an affine head's chosen-minus-rejected
score does not depend on the prompt at all: it sits at chance by
construction. The cross-attention head queries the visual tokens with e_h
and recovers the interaction. A second sweep moves the visual tokens the
cross-attention head reads to deeper layers of the frozen body.

    python demos/head_ablation.py [--seeds N]
"""
import argparse

import numpy as np

from mmreward import ModelConfig, RewardModel, TrainConfig, gen_synthetic_corpus, separable_alignment_spec, train
from mmreward.evaluation import accuracy_without_ties, judge_pairs


def held_out_accuracy(model, pairs):
    sc = model.score([p.prompt for p in pairs], [p.chosen for p in pairs], "alignment")[:, 0]
    sr = model.score([p.rejected_text for p in pairs], [p.rejected for p in pairs], "alignment")[:, 0]
    return accuracy_without_ties(judge_pairs(sc, sr))


def run(seed, head, visual_layer=0):
    spec = separable_alignment_spec()
    train_pairs, _ = gen_synthetic_corpus(seed, 2000, spec)
    test_pairs, _ = gen_synthetic_corpus(1000 + seed, 500, spec)
    model = RewardModel(ModelConfig(), seed=seed)
    model.add_perspective("alignment", head=head, hidden_layer=0, pooling="mean", visual_layer=visual_layer,
                          seed=seed)
    train(model, "alignment", train_pairs, TrainConfig(learning_rate=1e-3, batch_size=8, grad_accum=1, seed=seed))
    return held_out_accuracy(model, test_pairs)


def main(n_seeds):
    print(f"held-out forced-choice accuracy, mean over {n_seeds} seeds")
    for head in ("skipca", "linear", "mlp"):
        accs = [run(s, head) for s in range(n_seeds)]
        print(f"  {head:7s} {100 * np.mean(accs):5.1f}  (per seed: {', '.join(f'{100 * a:.1f}' for a in accs)})")
    print("cross-attention head, visual tokens taken from body layer L")
    for layer in range(ModelConfig().n_layers + 1):
        accs = [run(s, "skipca", visual_layer=layer) for s in range(n_seeds)]
        print(f"  L={layer}: {100 * np.mean(accs):5.1f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    main(ap.parse_args().seeds)
