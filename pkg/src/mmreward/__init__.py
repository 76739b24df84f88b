"""Multimodal reward modelling in numpy.

A small decoder-only body reads ``[visual tokens; prompt; EOS]``. Each
evaluation perspective owns a projector copy, LoRA factors and a reward
head; the body itself stays frozen. See the README for a tour.
"""
from .backbone import AdapterRegistry, ModelConfig, PerspectiveAdapter, merge_adapter
from .data import (CorpusSpec, BinaryExample, PairExample, Perspective, SyntheticImage, TextPrompt,
                   filter_overlap, gen_scored_corpus, gen_synthetic_corpus, load_dataset, mine_hard_negatives,
                   normalized_levenshtein, save_dataset, separable_alignment_spec)
from .errors import (CheckpointError, ConfigError, LabelingError, MiningError, NumericError, ParseError,
                     RegistryError, RewardModelError, SequenceLengthError, ShapeError)
from .evaluation import (PairJudgment, ScoredList, accuracy_with_ties, accuracy_without_ties, f1_binary,
                         judge_pair, judge_pairs, kendall_tau, pairwise_acc, pearson)
from .heads import RewardOutput
from .model import RewardModel, load_checkpoint, save_checkpoint
from .objectives import (SkewOperator, bt_loss, ce_loss, cross_prompt_label, gpm_score_diff, preference_prob,
                         skew_operator)
from .steering import SteeringConfig, ToyDiffusion, smc_steer
from .training import TrainConfig, TrainState, gradient_check, train, train_step

__version__ = "0.1.0"
