"""Synthetic text-image preference corpora, edit-distance filtering and
hard-negative mining.

Images are small float32 arrays in [0, 1] built from a grid of cells. Each
occupied cell holds one coloured object, so the ground-truth preference for
every perspective can be recomputed from the stored attributes alone.
"""
from __future__ import annotations

import base64
import json
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import ConfigError, MiningError, ParseError

PAD_ID = 0
EOS_ID = 1
N_SPECIAL = 2

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.85, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "cyan": (0.1, 0.9, 0.9),
    "white": (0.95, 0.95, 0.95),
}
HAZARD_COLOR = (1.0, 0.45, 0.0)
BACKGROUND = 0.08

SHAPES = ("square", "ring", "cross", "dot")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight")

# fixed word vocabulary; anything else is hashed into the remaining id range
VOCAB_WORDS = (
    NUMBER_WORDS
    + tuple(COLORS)
    + SHAPES
    + tuple(s + "s" for s in SHAPES)
    + ("a", "an", "and", "with", "of", "the", "on", "in", "image", "photo", "hazard", "sign")
)


class Perspective(str, Enum):
    ALIGNMENT = "alignment"
    FIDELITY = "fidelity"
    SAFETY = "safety"
    OVERALL = "overall"

    @classmethod
    def parse(cls, value: "str | Perspective") -> "Perspective":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown perspective {value!r}; expected one of {[p.value for p in cls]}") from None


def tokenize(raw: str, vocab_size: int = 256) -> tuple[int, ...]:
    words = raw.lower().split()
    known = {w: N_SPECIAL + i for i, w in enumerate(VOCAB_WORDS)}
    n_fixed = N_SPECIAL + len(VOCAB_WORDS)
    if vocab_size <= n_fixed:
        raise ConfigError(f"vocab_size must exceed {n_fixed}")
    ids = []
    for w in words:
        if w in known:
            ids.append(known[w])
        else:
            ids.append(n_fixed + zlib.crc32(w.encode()) % (vocab_size - n_fixed))
    return tuple(ids)


@dataclass(frozen=True)
class TextPrompt:
    raw: str
    tokens: tuple[int, ...]

    @classmethod
    def from_text(cls, raw: str, vocab_size: int = 256) -> "TextPrompt":
        tokens = tokenize(raw, vocab_size)
        if not tokens:
            raise ConfigError("prompt must contain at least one word")
        return cls(raw=raw, tokens=tokens)


@dataclass(frozen=True, eq=False)
class SyntheticImage:
    pixels: np.ndarray
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3:
            raise ValueError(f"image must be H x W x C, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other):
        if not isinstance(other, SyntheticImage):
            return NotImplemented
        return (
            self.pixels.shape == other.pixels.shape
            and np.array_equal(self.pixels, other.pixels)
            and self.attributes == other.attributes
        )

    def same_pixels(self, other: "SyntheticImage") -> bool:
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class PairExample:
    """One preference record.

    ``rejected_prompt`` is only set for mined negative-prompt pairs, where the
    rejected leg is the chosen image paired with a different caption.
    """

    prompt: TextPrompt
    chosen: SyntheticImage
    rejected: SyntheticImage
    perspective: Perspective
    rejected_prompt: TextPrompt | None = None

    @property
    def rejected_text(self) -> TextPrompt:
        return self.rejected_prompt if self.rejected_prompt is not None else self.prompt


@dataclass(frozen=True)
class BinaryExample:
    prompt: TextPrompt
    image: SyntheticImage
    label: bool
    perspective: Perspective = Perspective.SAFETY


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of the synthetic corpus.

    ``colors`` and ``shapes`` select from the module palettes. ``distractors``
    adds extra objects of non-prompt colours to every image, which makes the
    prompt/image matching harder to read off a pooled summary.
    """

    perspective: Perspective = Perspective.ALIGNMENT
    height: int = 16
    width: int = 16
    channels: int = 3
    cell: int = 4
    colors: tuple[str, ...] = tuple(COLORS)
    shapes: tuple[str, ...] = SHAPES
    max_count: int = 3
    corruption_levels: int = 4
    noise_scale: float = 0.08
    distractors: int = 0
    perturb: tuple[str, ...] = ("count", "color", "shape")
    vocab_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "perspective", Perspective.parse(self.perspective))
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "perturb", tuple(self.perturb))
        self.validate()

    @property
    def n_cells(self) -> int:
        return (self.height // self.cell) * (self.width // self.cell)

    def validate(self) -> None:
        if self.channels != 3:
            raise ConfigError("only RGB (3-channel) images are supported")
        if self.cell < 2 or self.height % self.cell or self.width % self.cell:
            raise ConfigError("image dims must be positive multiples of cell >= 2")
        if len(self.colors) < 2:
            raise ConfigError("need at least two colour classes")
        if len(self.shapes) < 2:
            raise ConfigError("need at least two shape classes")
        unknown = [c for c in self.colors if c not in COLORS] + [s for s in self.shapes if s not in SHAPES]
        if unknown:
            raise ConfigError(f"unknown attribute values: {unknown}")
        if not 2 <= self.max_count < len(NUMBER_WORDS):
            raise ConfigError(f"max_count must be in [2, {len(NUMBER_WORDS) - 1}]")
        if self.corruption_levels < 2:
            raise ConfigError("need at least two corruption levels")
        if self.noise_scale <= 0:
            raise ConfigError("noise_scale must be positive")
        if not self.perturb or set(self.perturb) - {"count", "color", "shape"}:
            raise ConfigError("perturb must be a non-empty subset of count/color/shape")
        if self.distractors < 0:
            raise ConfigError("distractors must be >= 0")
        # room for the objects, distractors and one hazard cell
        if self.max_count + self.distractors + 1 > self.n_cells:
            raise ConfigError("too many objects for the image grid")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["perspective"] = self.perspective.value
        d["colors"] = list(self.colors)
        d["shapes"] = list(self.shapes)
        d["perturb"] = list(self.perturb)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**d)


def separable_alignment_spec(**overrides) -> CorpusSpec:
    """Alignment pairs that differ only in object colour, with mild noise.

    Chosen and rejected images share count, shape, placement rule and
    corruption level, so a single prompt-conditioned feature separates them.
    """
    kw = dict(perspective="alignment", perturb=("color",), corruption_levels=2, noise_scale=0.04)
    kw.update(overrides)
    return CorpusSpec(**kw)


def shape_mask(shape: str, p: int) -> np.ndarray:
    i, j = np.mgrid[0:p, 0:p]
    c = (p - 1) / 2
    if shape == "square":
        return np.ones((p, p), dtype=bool)
    if shape == "ring":
        return (i == 0) | (j == 0) | (i == p - 1) | (j == p - 1)
    if shape == "cross":
        return (np.abs(i - c) < p / 4) | (np.abs(j - c) < p / 4)
    if shape == "dot":
        return (np.abs(i - c) < p / 4) & (np.abs(j - c) < p / 4)
    raise ConfigError(f"unknown shape {shape!r}")


def render(spec: CorpusSpec, objects: Sequence[tuple[int, str, str]], corruption: int,
           rng: np.random.Generator, hazard_cell: int | None = None) -> np.ndarray:
    """Draw ``(cell, color, shape)`` objects on the background and add noise."""
    p = spec.cell
    per_row = spec.width // p
    img = np.full((spec.height, spec.width, 3), BACKGROUND, dtype=np.float64)
    for cell, color, shape in objects:
        r, c = divmod(cell, per_row)
        block = img[r * p:(r + 1) * p, c * p:(c + 1) * p]
        block[shape_mask(shape, p)] = COLORS[color]
    if hazard_cell is not None:
        r, c = divmod(hazard_cell, per_row)
        i, j = np.mgrid[0:p, 0:p]
        block = img[r * p:(r + 1) * p, c * p:(c + 1) * p]
        block[(i + j) % 2 == 0] = HAZARD_COLOR
        block[(i + j) % 2 == 1] = 0.0
    if corruption > 0:
        img = img + rng.normal(0.0, spec.noise_scale * corruption, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def prompt_text(count: int, color: str, shape: str) -> str:
    noun = shape if count == 1 else shape + "s"
    return f"{NUMBER_WORDS[count]} {color} {noun}"


def match_score(prompt_attrs: dict, image_attrs: dict) -> int:
    """Number of prompt attributes (count, color, shape) the image realises."""
    return sum(prompt_attrs[k] == image_attrs[k] for k in ("count", "color", "shape"))


def preferred_by_rule(perspective: Perspective, prompt_attrs: dict, chosen: dict, rejected: dict) -> bool:
    """Whether ``chosen`` beats ``rejected`` under the corpus labelling rule."""
    if perspective is Perspective.ALIGNMENT:
        return match_score(prompt_attrs, chosen) > match_score(prompt_attrs, rejected)
    if perspective is Perspective.FIDELITY:
        return chosen["corruption"] < rejected["corruption"]
    if perspective is Perspective.SAFETY:
        return (not chosen["unsafe"]) and rejected["unsafe"]
    return overall_score(prompt_attrs, chosen) > overall_score(prompt_attrs, rejected)


def overall_score(prompt_attrs: dict, attrs: dict) -> int:
    return 2 * match_score(prompt_attrs, attrs) - attrs["corruption"] - 4 * int(attrs["unsafe"])


def _make_image(spec, rng, count, color, shape, corruption, unsafe):
    cells = rng.permutation(spec.n_cells)
    obj_cells = [int(c) for c in cells[:count]]
    others = [c for c in spec.colors if c != color]
    distractors = []
    for k in range(spec.distractors):
        distractors.append((int(cells[count + k]), str(rng.choice(others)), str(rng.choice(spec.shapes))))
    hazard = int(cells[count + spec.distractors]) if unsafe else None
    objects = [(c, color, shape) for c in obj_cells] + distractors
    pixels = render(spec, objects, corruption, rng, hazard_cell=hazard)
    attrs = {"count": count, "color": color, "shape": shape, "corruption": corruption,
             "unsafe": bool(unsafe), "cells": obj_cells}
    return SyntheticImage(pixels, attrs)


def _perturb(spec, rng, attrs):
    """Change exactly one of count / color / shape."""
    out = dict(count=attrs["count"], color=attrs["color"], shape=attrs["shape"])
    key = spec.perturb[int(rng.integers(len(spec.perturb)))]
    if key == "count":
        out["count"] = int(rng.choice([c for c in range(1, spec.max_count + 1) if c != attrs["count"]]))
    elif key == "color":
        out["color"] = str(rng.choice([c for c in spec.colors if c != attrs["color"]]))
    else:
        out["shape"] = str(rng.choice([s for s in spec.shapes if s != attrs["shape"]]))
    return out


def gen_synthetic_corpus(seed: int, n: int, spec: CorpusSpec | None = None
                         ) -> tuple[list[PairExample], list[BinaryExample]]:
    """Generate ``n`` preference pairs plus their 2n unpaired labelled legs.

    The output is a pure function of ``(seed, spec)``.
    """
    spec = spec or CorpusSpec()
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    pairs, binaries = [], []
    persp = spec.perspective
    top = spec.corruption_levels - 1
    for _ in range(n):
        count = int(rng.integers(1, spec.max_count + 1))
        color = str(rng.choice(spec.colors))
        shape = str(rng.choice(spec.shapes))
        prompt = TextPrompt.from_text(prompt_text(count, color, shape), spec.vocab_size)
        if persp is Perspective.ALIGNMENT:
            corr = int(rng.integers(0, 2))
            chosen = _make_image(spec, rng, count, color, shape, corr, False)
            alt = _perturb(spec, rng, chosen.attributes)
            rejected = _make_image(spec, rng, alt["count"], alt["color"], alt["shape"], corr, False)
        elif persp is Perspective.FIDELITY:
            c_lo, c_hi = sorted(rng.choice(spec.corruption_levels, size=2, replace=False))
            chosen = _make_image(spec, rng, count, color, shape, int(c_lo), False)
            rejected = _make_image(spec, rng, count, color, shape, int(c_hi), False)
        elif persp is Perspective.SAFETY:
            corr = int(rng.integers(0, 2))
            chosen = _make_image(spec, rng, count, color, shape, corr, False)
            rejected = _make_image(spec, rng, count, color, shape, corr, True)
        else:
            c_lo = int(rng.integers(0, top))
            chosen = _make_image(spec, rng, count, color, shape, c_lo, False)
            if rng.random() < 0.5:
                alt = _perturb(spec, rng, chosen.attributes)
                c_hi = int(rng.integers(c_lo, spec.corruption_levels))
            else:
                alt = chosen.attributes
                c_hi = int(rng.integers(c_lo + 1, spec.corruption_levels))
            rejected = _make_image(spec, rng, alt["count"], alt["color"], alt["shape"], c_hi, False)
        pairs.append(PairExample(prompt, chosen, rejected, persp))
        binaries.append(BinaryExample(prompt, chosen, True, persp))
        binaries.append(BinaryExample(prompt, rejected, False, persp))
    return pairs, binaries


def gen_scored_corpus(seed: int, n: int, spec: CorpusSpec | None = None
                      ) -> list[tuple[TextPrompt, SyntheticImage, float]]:
    """Unpaired (prompt, image, human score) triples for correlation metrics.

    The score is the overall rule score plus small annotator jitter, so most
    scores are distinct but their ordering follows the attributes.
    """
    spec = spec or CorpusSpec()
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        pa = {"count": int(rng.integers(1, spec.max_count + 1)),
              "color": str(rng.choice(spec.colors)), "shape": str(rng.choice(spec.shapes))}
        prompt = TextPrompt.from_text(prompt_text(pa["count"], pa["color"], pa["shape"]), spec.vocab_size)
        ia = pa if rng.random() < 0.5 else _perturb(spec, rng, pa)
        corr = int(rng.integers(0, spec.corruption_levels))
        img = _make_image(spec, rng, ia["count"], ia["color"], ia["shape"], corr, bool(rng.random() < 0.2))
        score = overall_score(pa, img.attributes) + 0.1 * float(rng.standard_normal())
        out.append((prompt, img, score))
    return out


def prompt_attributes(prompt: TextPrompt) -> dict:
    """Parse ``"<number> <color> <shape>[s]"`` back into attributes."""
    words = prompt.raw.lower().split()
    if len(words) != 3:
        raise ValueError(f"not a corpus prompt: {prompt.raw!r}")
    shape = words[2][:-1] if words[2].endswith("s") and words[2][:-1] in SHAPES else words[2]
    return {"count": NUMBER_WORDS.index(words[0]), "color": words[1], "shape": shape}


# -- edit distance ------------------------------------------------------------

def levenshtein(a: str, b: str) -> int:
    """Unit-cost insert/delete/substitute distance (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_levenshtein(a: str, b: str) -> float:
    return levenshtein(a, b) / max(len(a), len(b), 1)


def _prompt_of(example) -> str:
    return example.prompt.raw if hasattr(example, "prompt") else str(example)


def filter_overlap(train: Sequence, holdout: Sequence, threshold: float) -> list:
    """Drop training examples whose prompt is within ``threshold`` (normalized
    edit distance, strict) of any holdout prompt. Order is preserved."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("threshold must lie in [0, 1]")
    held = sorted({_prompt_of(h) for h in holdout})
    cache: dict[str, bool] = {}
    kept = []
    for ex in train:
        t = _prompt_of(ex)
        if t not in cache:
            cache[t] = all(normalized_levenshtein(t, h) >= threshold for h in held)
        if cache[t]:
            kept.append(ex)
    return kept


# -- hard negatives -------------------------------------------------------------

def _nearest_prompts(prompts: list[str]) -> list[int]:
    out = []
    for i, t in enumerate(prompts):
        best, best_d = -1, np.inf
        for j, u in enumerate(prompts):
            if j == i:
                continue
            d = normalized_levenshtein(t, u)
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return out


def mine_hard_negatives(dataset: Sequence[PairExample]) -> list[PairExample]:
    """Return ``dataset`` followed by mined hard-negative pairs.

    For each prompt and each of its best-aligned images (the distinct chosen
    images of that prompt) two pairs are emitted:

    * negative prompt: the rejected leg is the same image captioned with the
      closest other prompt (normalized edit distance);
    * negative image: the rejected leg is the closest image (pixel L2) among
      images attached to other prompts.

    Ties go to the lowest first-appearance index.
    """
    groups: dict[str, list[int]] = {}
    for idx, ex in enumerate(dataset):
        groups.setdefault(ex.prompt.raw, []).append(idx)
    prompts = list(groups)
    if len(prompts) < 2:
        raise MiningError("negative-prompt mining needs at least 2 distinct prompts")

    # distinct images in first-appearance order, with the prompt that first used them
    index: dict[bytes, int] = {}
    images: list[SyntheticImage] = []
    owner: list[str] = []
    for ex in dataset:
        for img in (ex.chosen, ex.rejected):
            key = _pixel_key(img)
            if key not in index:
                index[key] = len(images)
                images.append(img)
                owner.append(ex.prompt.raw)
    if len(images) < 2:
        raise MiningError("negative-image mining needs at least 2 distinct images")
    flat = np.stack([im.pixels.ravel().astype(np.float64) for im in images])
    sq = (flat ** 2).sum(1)
    owner_arr = np.array(owner, dtype=object)

    nearest = dict(zip(prompts, (prompts[j] for j in _nearest_prompts(prompts))))
    prompt_obj = {ex.prompt.raw: ex.prompt for ex in dataset}
    mined: list[PairExample] = []
    for t in prompts:
        group = [dataset[i] for i in groups[t]]
        best: list[SyntheticImage] = []
        seen: set[bytes] = set()
        for ex in group:
            key = _pixel_key(ex.chosen)
            if key not in seen:
                seen.add(key)
                best.append(ex.chosen)
        t_neg = prompt_obj[nearest[t]]
        others = owner_arr != t
        for img in best:
            mined.append(PairExample(group[0].prompt, img, img, group[0].perspective, rejected_prompt=t_neg))
            cand = others.copy()
            cand[index[_pixel_key(img)]] = False
            if not cand.any():
                raise MiningError(f"no images outside prompt {t!r} to mine a negative from")
            v = img.pixels.ravel().astype(np.float64)
            d = np.where(cand, sq - 2 * flat @ v + v @ v, np.inf)
            mined.append(PairExample(group[0].prompt, img, images[int(np.argmin(d))], group[0].perspective))
    return list(dataset) + mined


def _pixel_key(img: SyntheticImage) -> bytes:
    return repr(img.pixels.shape).encode() + img.pixels.tobytes()


# -- serialization ---------------------------------------------------------------

def _enc_image(img: SyntheticImage) -> dict:
    px = np.ascontiguousarray(img.pixels, dtype="<f4")
    return {"shape": list(px.shape), "data": base64.b64encode(px.tobytes()).decode("ascii"),
            "attributes": img.attributes}


def _dec_image(d: dict) -> SyntheticImage:
    raw = base64.b64decode(d["data"], validate=True)
    px = np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).copy()
    return SyntheticImage(px, d.get("attributes", {}))


def _enc_prompt(p: TextPrompt) -> dict:
    return {"raw": p.raw, "tokens": list(p.tokens)}


def _dec_prompt(d: dict) -> TextPrompt:
    return TextPrompt(raw=d["raw"], tokens=tuple(int(t) for t in d["tokens"]))


def example_to_record(ex) -> dict:
    if isinstance(ex, PairExample):
        rec = {"kind": "pair", "prompt": _enc_prompt(ex.prompt), "chosen": _enc_image(ex.chosen),
               "rejected": _enc_image(ex.rejected), "perspective": ex.perspective.value}
        if ex.rejected_prompt is not None:
            rec["rejected_prompt"] = _enc_prompt(ex.rejected_prompt)
        return rec
    if isinstance(ex, BinaryExample):
        return {"kind": "binary", "prompt": _enc_prompt(ex.prompt), "image": _enc_image(ex.image),
                "label": bool(ex.label), "perspective": ex.perspective.value}
    raise TypeError(f"cannot serialize {type(ex).__name__}")


def record_to_example(rec: dict):
    kind = rec["kind"]
    persp = Perspective(rec["perspective"])
    if kind == "pair":
        rp = rec.get("rejected_prompt")
        return PairExample(_dec_prompt(rec["prompt"]), _dec_image(rec["chosen"]), _dec_image(rec["rejected"]),
                           persp, _dec_prompt(rp) if rp else None)
    if kind == "binary":
        if not isinstance(rec["label"], bool):
            raise ValueError("label must be a boolean")
        return BinaryExample(_dec_prompt(rec["prompt"]), _dec_image(rec["image"]), rec["label"], persp)
    raise ValueError(f"unknown record kind {kind!r}")


def dumps_dataset(dataset: Iterable) -> str:
    return "".join(json.dumps(example_to_record(ex), sort_keys=True) + "\n" for ex in dataset)


def save_dataset(dataset: Iterable, path: str | Path) -> None:
    atomic_write_text(path, dumps_dataset(dataset))


def load_dataset(path: str | Path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_to_example(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed record ({exc})", lineno) from exc
    return out
