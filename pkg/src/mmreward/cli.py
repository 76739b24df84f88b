"""Command-line entry point: ``mmreward <command> [options]``.

Commands: gen-data, mine-negatives, filter, train, eval, steer, grad-check.
Every command writes a ``<report>.json`` and ``<report>.csv`` pair. All files
are written atomically. Exit status: 0 success, 1 runtime failure, 2 usage
error, 3 invalid configuration or input.

Optional ``--config`` files are JSON objects with a ``schema_version`` and
any of the sections ``corpus``, ``model``, ``adapter``, ``train``; unknown
keys are rejected. Flags given on the command line override the file.
The ``MMREWARD_OUTPUT_DIR`` environment variable, when set, is the base for
relative output paths; nothing else is read from the environment.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from ._io import atomic_write_text
from .backbone import ModelConfig
from .errors import (CheckpointError, ConfigError, LabelingError, MiningError, ParseError, RegistryError,
                     RewardModelError, SequenceLengthError, ShapeError)
from .evaluation import (DEFAULT_TIE_EPS, METRICS, UndefinedMetricError, accuracy_with_ties,
                         accuracy_without_ties, f1_binary, judge_pairs, kendall_tau, pairwise_acc, pearson)
from .objectives import gpm_score_diff, skew_operator
from .model import RewardModel, load_checkpoint, save_checkpoint
from .steering import (LEARNED_LAMBDA, ORACLE_LAMBDA, SteeringConfig, ToyDiffusion, model_reward_fn,
                       oracle_reward_fn, smc_steer)
from .training import TrainConfig, gradient_check, randomize_trainable, train, write_loss_curve

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
CONFIG_SCHEMA_VERSION = 1
CONFIG_SECTIONS = ("corpus", "model", "adapter", "train")
ADAPTER_KEYS = ("head", "out_dim", "hidden_layer", "pooling", "visual_layer", "head_heads")
OUTPUT_DIR_ENV = "MMREWARD_OUTPUT_DIR"
# validation-type failures map to exit status 3
CONFIG_ERRORS = (ConfigError, ParseError, CheckpointError, ShapeError, SequenceLengthError, RegistryError,
                 LabelingError, UndefinedMetricError, FileNotFoundError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# -- config and paths ---------------------------------------------------------------

def load_run_config(path) -> dict:
    """Read and validate a JSON run-config file; returns its sections."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    version = doc.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    for name, sec in doc.items():
        if not isinstance(sec, dict):
            raise ConfigError(f"{path}: section {name!r} must be an object")
    bad = set(doc.get("adapter", {})) - set(ADAPTER_KEYS)
    if bad:
        raise ConfigError(f"{path}: unknown adapter keys {sorted(bad)}")
    # validate eagerly so errors surface before any work happens
    if "corpus" in doc:
        D.CorpusSpec.from_dict(doc["corpus"])
    if "model" in doc:
        ModelConfig.from_dict(doc["model"])
    if "train" in doc:
        TrainConfig.from_dict(doc["train"])
    return doc


def output_path(p) -> Path:
    p = Path(p)
    base = os.environ.get(OUTPUT_DIR_ENV)
    return Path(base) / p if base and not p.is_absolute() else p


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _json_value(v):
    # json writes floats in shortest round-trip form already
    if isinstance(v, (float, np.floating)):
        return float(v)
    return int(v) if isinstance(v, (int, np.integer)) else v


def write_report(prefix, command: str, rows: list[tuple[str, object, object]], extra: dict | None = None) -> None:
    """``prefix.json`` and ``prefix.csv`` with one (metric, value, n) row each."""
    doc = {"command": command, "metrics": {m: {"value": _json_value(v), "n": _json_value(n)} for m, v, n in rows}}
    if extra:
        doc.update(extra)
    atomic_write_text(Path(f"{prefix}.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "n"])
    for m, v, n in rows:
        w.writerow([m, _fmt(v), n])
    atomic_write_text(Path(f"{prefix}.csv"), buf.getvalue())


def _report_prefix(args, default: Path) -> Path:
    return output_path(args.report) if args.report else default.with_name(default.stem + ".report")


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    spec_d = dict(cfg.get("corpus", {}))
    if args.spec:
        try:
            spec_d.update(json.loads(Path(args.spec).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: not valid JSON ({exc})") from exc
    if args.perspective:
        spec_d["perspective"] = args.perspective
    if args.separable:
        spec = D.separable_alignment_spec(**spec_d)
    else:
        spec = D.CorpusSpec.from_dict(spec_d)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    out = output_path(args.out)
    if args.binary:
        _, records = D.gen_synthetic_corpus(args.seed, args.n, spec)
    else:
        records, _ = D.gen_synthetic_corpus(args.seed, args.n, spec)
    D.save_dataset(records, out)
    write_report(_report_prefix(args, out), "gen-data", [("records", len(records), len(records))],
                 {"corpus": spec.to_dict(), "seed": args.seed})
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def cmd_mine(args) -> int:
    ds = D.load_dataset(args.data)
    pairs = [e for e in ds if isinstance(e, D.PairExample)]
    if len(pairs) != len(ds):
        raise ConfigError("mine-negatives needs a pair dataset")
    mined = D.mine_hard_negatives(pairs)
    out = output_path(args.out)
    D.save_dataset(mined, out)
    write_report(_report_prefix(args, out), "mine-negatives",
                 [("input_pairs", len(pairs), len(pairs)), ("mined_pairs", len(mined) - len(pairs), len(mined))])
    print(f"{len(pairs)} pairs + {len(mined) - len(pairs)} mined -> {out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    tr = D.load_dataset(args.train)
    ho = D.load_dataset(args.holdout)
    kept = D.filter_overlap(tr, ho, args.threshold)
    out = output_path(args.out)
    D.save_dataset(kept, out)
    write_report(_report_prefix(args, out), "filter",
                 [("kept", len(kept), len(tr)), ("dropped", len(tr) - len(kept), len(tr))],
                 {"threshold": args.threshold})
    print(f"kept {len(kept)} of {len(tr)} -> {out}")
    return EXIT_OK


def _train_config(args, cfg) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    d.pop("schema_version", None)
    for flag, key in (("lr", "learning_rate"), ("batch_size", "batch_size"), ("grad_accum", "grad_accum"),
                      ("epochs", "epochs"), ("objective", "objective"), ("temperature", "temperature")):
        v = getattr(args, flag)
        if v is not None:
            d[key] = v
    d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _adapter_kwargs(args, cfg, objective: str) -> dict:
    kw = dict(cfg.get("adapter", {}))
    for key in ("head", "hidden_layer", "pooling", "visual_layer", "out_dim"):
        v = getattr(args, key, None)
        if v is not None:
            kw[key] = v
    kw.setdefault("out_dim", 2 if objective == "gpm" else 1)
    return kw


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    tcfg = _train_config(args, cfg)
    mcfg = ModelConfig.from_dict(cfg.get("model", {}))
    data = D.load_dataset(args.data)
    tag = D.Perspective.parse(args.perspective)
    data = [e for e in data if e.perspective is tag]
    if not data:
        raise ConfigError(f"no {tag.value} records in {args.data}")
    model = RewardModel(mcfg, seed=args.seed)
    model.add_perspective(tag, seed=args.seed, **_adapter_kwargs(args, cfg, tcfg.objective))
    t0 = time.perf_counter()
    state = train(model, tag.value, data, tcfg)
    elapsed = time.perf_counter() - t0
    out = output_path(args.out)
    save_checkpoint(model, out)
    curve = output_path(args.loss_curve) if args.loss_curve else out.with_suffix(".loss.csv")
    write_loss_curve(state.history, curve)
    losses = [h[2] for h in state.history]
    counts = model.parameter_counts(tag.value)
    write_report(_report_prefix(args, out), "train",
                 [("final_loss", losses[-1], len(losses)), ("mean_loss", float(np.mean(losses)), len(losses)),
                  ("optimizer_steps", state.step, state.micro_step),
                  ("trainable_fraction", counts["fraction"], counts["total"])],
                 {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "config_hash": mcfg.config_hash(),
                  "perspective": tag.value})
    print(f"trained {tag.value} on {len(data)} records in {elapsed:.1f}s; final loss {losses[-1]:.4f}; "
          f"checkpoint {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = ModelConfig.from_dict(load_run_config(args.config).get("model", {})) if args.config else None
    model = load_checkpoint(args.checkpoint, expected)
    tag = D.Perspective.parse(args.perspective).value
    ad = model.adapter(tag)
    if ad.mode != "scalar" and any(m != "accuracy_with_ties" and m != "accuracy_without_ties"
                                   for m in args.metrics):
        raise ConfigError("correlation and F1 metrics need a scalar head")
    data = D.load_dataset(args.data)
    pairs = [e for e in data if isinstance(e, D.PairExample)]
    bins = [e for e in data if isinstance(e, D.BinaryExample)]
    rows = []
    want = set(args.metrics)
    if want & {"accuracy_with_ties", "accuracy_without_ties"}:
        if not pairs:
            raise ConfigError("accuracy metrics need pair records")
        sc = model.score([p.prompt for p in pairs], [p.chosen for p in pairs], tag)
        sr = model.score([p.rejected_text for p in pairs], [p.rejected for p in pairs], tag)
        if ad.mode == "scalar":
            sc, sr = sc[:, 0], sr[:, 0]
        else:
            # preference from the antisymmetric form: compare <R c, r> with 0
            diff = gpm_score_diff(sc, sr, skew_operator(sc.shape[1]))
            sc, sr = diff, np.zeros_like(diff)
        js = judge_pairs(sc, sr, args.tie_eps)
        if "accuracy_with_ties" in want:
            rows.append(("accuracy_with_ties", accuracy_with_ties(js), len(js)))
        if "accuracy_without_ties" in want:
            rows.append(("accuracy_without_ties", accuracy_without_ties(js), len(js)))
    if want & {"pearson", "kendall_tau", "pairwise_acc", "f1"}:
        if not bins:
            raise ConfigError("correlation and F1 metrics need binary or scored records")
        s = model.score([b.prompt for b in bins], [b.image for b in bins], tag)[:, 0]
        # binary labels act as the human scores (ties handled by the metrics)
        human = np.array([float(b.label) for b in bins])
        for name, fn in (("pearson", pearson), ("kendall_tau", kendall_tau), ("pairwise_acc", pairwise_acc)):
            if name in want:
                rows.append((name, fn(s, human), len(bins)))
        if "f1" in want:
            rows.append(("f1", f1_binary(s > 0, [b.label for b in bins]), len(bins)))
    order = {m: i for i, m in enumerate(METRICS)}
    rows.sort(key=lambda r: order[r[0]])
    prefix = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval")
    prefix = output_path(prefix)
    write_report(prefix, "eval", rows, {"perspective": tag, "tie_eps": args.tie_eps,
                                        "config_hash": model.config.config_hash()})
    for m, v, n in rows:
        print(f"{m}\t{v:.6f}\t{n}")
    return EXIT_OK


def cmd_steer(args) -> int:
    if args.steps < 1 or args.k < 1 or args.seeds < 1:
        raise ConfigError("--steps, --k and --seeds must be >= 1")
    process = ToyDiffusion.four_modes(n_steps=args.steps)
    if args.oracle is not None:
        target = np.array(args.oracle, dtype=np.float64)
        if target.shape != (process.dim,):
            raise ConfigError(f"--oracle needs {process.dim} coordinates")
        reward_fn, prompt = oracle_reward_fn(target), target
        lam = ORACLE_LAMBDA if args.lam is None else args.lam
    else:
        model = load_checkpoint(args.checkpoint)
        tag = D.Perspective.parse(args.perspective).value
        if model.adapter(tag).mode != "scalar":
            raise ConfigError("steering needs a scalar reward head")
        colors = tuple(args.colors)
        reward_fn = model_reward_fn(model, tag, process, colors)
        prompt = D.TextPrompt.from_text(args.prompt, model.config.vocab_size)
        lam = LEARNED_LAMBDA if args.lam is None else args.lam
    scfg = SteeringConfig(k=args.k, lam=lam, resample_rule=args.resample, ess_fraction=args.ess_fraction,
                          reward_fn=reward_fn)
    out = output_path(args.out)
    finals, buf = [], io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "step", "ess", "mean_reward", "max_reward", "resampled"])
    samples = []
    for i in range(args.seeds):
        seed = args.seed + i
        res = smc_steer(process, scfg, prompt, seed=seed)
        finals.append(res.reward)
        samples.append([seed, *(repr(float(v)) for v in res.sample), repr(res.reward)])
        for t in range(len(res.ess)):
            w.writerow([seed, t + 1, repr(float(res.ess[t])), repr(float(res.mean_reward[t])),
                        repr(float(res.max_reward[t])), int(res.resampled[t])])
    atomic_write_text(out, buf.getvalue())
    sbuf = io.StringIO()
    sw = csv.writer(sbuf, lineterminator="\n")
    sw.writerow(["seed", *(f"x{j}" for j in range(process.dim)), "reward"])
    sw.writerows(samples)
    atomic_write_text(out.with_name(out.stem + ".samples.csv"), sbuf.getvalue())
    write_report(_report_prefix(args, out), "steer",
                 [("mean_final_reward", float(np.mean(finals)), len(finals)),
                  ("max_final_reward", float(np.max(finals)), len(finals))],
                 {"k": args.k, "lambda": lam, "steps": args.steps, "resample_rule": args.resample})
    print(f"mean final reward {np.mean(finals):.6f} over {len(finals)} seeds; diagnostics {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    mcfg = ModelConfig(d_model=args.d_model, n_layers=2, n_heads=2, max_prompt_len=8, lora_rank=2)
    model = RewardModel(mcfg, seed=args.seed, dtype=np.float64)
    out_dim = 2 if args.objective == "gpm" else 1
    model.add_perspective("alignment", head=args.head, out_dim=out_dim, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    randomize_trainable(model, "alignment", rng)
    pairs, bins = D.gen_synthetic_corpus(args.seed, 3, D.CorpusSpec())
    batch = bins[:4] if args.objective == "ce" else pairs
    res = gradient_check(model, "alignment", batch, args.objective, epsilon=args.epsilon,
                         n_samples=args.samples, seed=args.seed)
    ok = res.max_rel_error < 1e-4
    if args.report:
        write_report(output_path(args.report), "grad-check", [("max_rel_error", res.max_rel_error, res.n_checked)],
                     {"worst": res.worst, "objective": args.objective, "head": args.head, "pass": ok})
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_checked} entries (worst {res.worst}) "
          f"-> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmreward", description="Multimodal reward model toolkit (numpy).")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic preference corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--perspective", choices=[t.value for t in D.Perspective])
    g.add_argument("--separable", action="store_true", help="colour-only alignment pairs")
    g.add_argument("--binary", action="store_true", help="emit labelled single images instead of pairs")
    g.add_argument("--config")
    g.add_argument("--spec", help="JSON corpus spec (the corpus section on its own)")
    g.set_defaults(fn=cmd_gen_data)

    m = sub.add_parser("mine-negatives", help="append hard-negative pairs to a dataset")
    m.add_argument("--in", "--data", dest="data", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_mine)

    f = sub.add_parser("filter", help="drop training records whose prompts are near holdout prompts")
    f.add_argument("--train", required=True)
    f.add_argument("--holdout", required=True)
    f.add_argument("--threshold", type=float, default=0.2)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_filter)

    t = sub.add_parser("train", help="fine-tune one perspective and save a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--perspective", required=True)
    t.add_argument("--out", "--out-checkpoint", dest="out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--config")
    t.add_argument("--loss-curve")
    t.add_argument("--objective", choices=("bt", "gpm", "ce"))
    t.add_argument("--head", choices=("skipca", "linear", "mlp"))
    t.add_argument("--hidden-layer", type=int)
    t.add_argument("--visual-layer", type=int)
    t.add_argument("--pooling", choices=("eos", "mean"))
    t.add_argument("--out-dim", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--grad-accum", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--temperature", type=float)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a dataset with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--perspective", required=True)
    e.add_argument("--metrics", nargs="+", choices=METRICS, default=["accuracy_with_ties", "accuracy_without_ties"])
    e.add_argument("--tie-eps", type=float, default=DEFAULT_TIE_EPS)
    e.add_argument("--config", help="run config whose model section must match the checkpoint")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("steer", help="reward-steered sampling on the toy process")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", type=float, nargs=2, metavar=("X", "Y"), help="target point of the analytic reward")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--steps", type=int, default=30)
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--resample", choices=("every_step", "ess_threshold"), default="every_step")
    s.add_argument("--ess-fraction", type=float, default=0.5)
    s.add_argument("--perspective", default="alignment")
    s.add_argument("--prompt", default="one red square")
    s.add_argument("--colors", nargs=4, default=["red", "green", "blue", "yellow"])
    s.add_argument("--out", required=True, help="diagnostics CSV path")
    s.set_defaults(fn=cmd_steer)

    c = sub.add_parser("grad-check", help="finite-difference check of the analytic gradients")
    c.add_argument("--objective", choices=("bt", "gpm", "ce"), default="bt")
    c.add_argument("--head", choices=("skipca", "linear", "mlp"), default="skipca")
    c.add_argument("--d-model", type=int, default=8)
    c.add_argument("--epsilon", type=float, default=1e-5)
    c.add_argument("--samples", type=int, default=50)
    c.set_defaults(fn=cmd_grad_check)

    for sp in (g, m, f, t, e, s, c):
        sp.add_argument("--seed", type=int, default=0)
        if sp is not e:
            sp.add_argument("--report", help="report prefix (writes .json and .csv)")
    e.add_argument("--out", help="report prefix (default: <checkpoint>.eval)")
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RewardModelError, MiningError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
