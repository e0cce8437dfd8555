"""JSONL corpora, coded corpora and the synthetic attribute benchmark."""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusRecord:
    text: str
    label: str | None = None


def _validate(obj, attributes: Sequence[str] | None, lineno: int) -> CorpusRecord:
    if not isinstance(obj, dict):
        raise CorpusError(f"line {lineno}: expected a JSON object")
    extra = set(obj) - {"text", "label"}
    if extra:
        raise CorpusError(f"line {lineno}: unexpected keys {sorted(extra)}")
    text = obj.get("text")
    if not isinstance(text, str):
        raise CorpusError(f"line {lineno}: missing or non-string \"text\"")
    if not text.strip():
        raise CorpusError(f"line {lineno}: empty text")
    label = obj.get("label")
    if label is not None:
        if not isinstance(label, str):
            raise CorpusError(f"line {lineno}: label must be a string")
        if attributes is not None and label not in attributes:
            raise CorpusError(f"line {lineno}: unknown label {label!r} (attributes: {list(attributes)})")
    return CorpusRecord(text, label)


def parse_corpus(lines: Iterable[str], attributes: Sequence[str] | None = None) -> list[CorpusRecord]:
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError(f"line {lineno}: malformed JSON ({e.msg})") from None
        records.append(_validate(obj, attributes, lineno))
    return records


def load_corpus(path: str | Path, attributes: Sequence[str] | None = None) -> list[CorpusRecord]:
    """Read a JSONL corpus: one ``{"text": ..., "label": ...}`` object per line."""
    with open(path, encoding="utf-8") as f:
        return parse_corpus(f, attributes)


def save_corpus(path: str | Path, records: Iterable[CorpusRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            obj = {"text": r.text} if r.label is None else {"text": r.text, "label": r.label}
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def corpus_fingerprint(records: Iterable[CorpusRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps([r.text, r.label], ensure_ascii=False).encode())
        h.update(b"\n")
    return h.hexdigest()


def save_coded(path: str | Path, coded: Iterable[tuple[str, Sequence[float]]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for text, code in coded:
            f.write(json.dumps({"text": text, "code": [float(c) for c in code]}, ensure_ascii=False) + "\n")


def load_coded(path: str | Path, n_attributes: int | None = None) -> list[tuple[str, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                text, code = obj["text"], np.asarray(obj["code"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"{path}: line {lineno}: bad coded record ({e})") from None
            if code.ndim != 1 or (n_attributes is not None and len(code) != n_attributes):
                raise CorpusError(f"{path}: line {lineno}: code length {code.shape} != {n_attributes}")
            if not np.all(np.isfinite(code)):
                raise CorpusError(f"{path}: line {lineno}: non-finite code")
            out.append((text, code))
    return out


# ---------------------------------------------------------------- synthetic benchmark

@dataclass(frozen=True)
class SyntheticSpec:
    """Word-mixture corpus where each attribute owns a block of marker words.

    A text of attribute ``k`` draws a strength ``s`` uniformly from
    ``strength``; each word is then one of ``k``'s marker words with
    probability ``s``, another attribute's marker word with probability
    ``(1 - s) * cross_talk``, and a shared filler word otherwise.  Strength
    varies per text, so classifier logits carry graded, non-exclusive signal.
    """

    attributes: tuple[str, ...] = ("pos", "neg")
    n_shared: int = 24
    n_marker: int = 12
    word_len: tuple[int, int] = (2, 4)
    words_per_text: tuple[int, int] = (8, 11)
    strength: tuple[float, float] = (0.6, 0.95)
    cross_talk: float = 0.1
    n_labeled: int = 600
    n_unlabeled: int = 3200
    n_heldout: int = 800
    seed: int = 1234
    tv_floor: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if len(self.attributes) < 2:
            raise ValueError("need at least two attributes")
        if len(set(self.attributes)) != len(self.attributes):
            raise ValueError("attribute names must be distinct")
        lo, hi = self.strength
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"strength range {self.strength} must lie in [0, 1]")
        if not 0 <= self.cross_talk <= 1:
            raise ValueError("cross_talk must lie in [0, 1]")
        if min(self.n_labeled, self.n_unlabeled, self.n_heldout) < 0:
            raise ValueError("corpus sizes must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("attributes", "word_len", "words_per_text", "strength"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


PRESETS = {
    # 2000 held-out texts: the judge is trained on this split, and 800 left it
    # measurably biased on 30-character continuations
    "sentiment": SyntheticSpec(attributes=("pos", "neg"), n_heldout=2000),
    "topic": SyntheticSpec(attributes=("world", "sports", "business", "scitech"),
                           n_labeled=800, n_unlabeled=3200, n_heldout=2000),
}


def preset(name: str, **overrides) -> SyntheticSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown synthetic preset {name!r}; choose from {sorted(PRESETS)}")
    d = PRESETS[name].to_dict()
    d.update(overrides)
    return SyntheticSpec.from_dict(d)


@dataclass
class SyntheticWorld:
    """The word inventory and per-attribute word distributions implied by a spec."""

    spec: SyntheticSpec
    shared: list[str] = field(default_factory=list)
    markers: list[list[str]] = field(default_factory=list)

    @classmethod
    def build(cls, spec: SyntheticSpec) -> "SyntheticWorld":
        rng = np.random.default_rng([spec.seed, 0])
        letters = np.array(list(string.ascii_lowercase))
        need = spec.n_shared + spec.n_marker * len(spec.attributes)
        words: list[str] = []
        seen: set[str] = set()
        while len(words) < need:
            n = int(rng.integers(spec.word_len[0], spec.word_len[1] + 1))
            w = "".join(rng.choice(letters, size=n))
            if w not in seen:
                seen.add(w)
                words.append(w)
        shared = words[:spec.n_shared]
        markers = [words[spec.n_shared + i * spec.n_marker: spec.n_shared + (i + 1) * spec.n_marker]
                   for i in range(len(spec.attributes))]
        return cls(spec, shared, markers)

    @property
    def vocabulary(self) -> list[str]:
        return self.shared + [w for block in self.markers for w in block]

    def word_distribution(self, k: int) -> np.ndarray:
        """Expected unigram distribution over :attr:`vocabulary` for attribute ``k``."""
        spec = self.spec
        A = len(spec.attributes)
        s = 0.5 * (spec.strength[0] + spec.strength[1])
        p = np.zeros(len(self.vocabulary))
        if spec.n_shared:
            p[:spec.n_shared] = (1 - s) * (1 - spec.cross_talk if A > 1 else 1) / spec.n_shared
        for j in range(A):
            lo = spec.n_shared + j * spec.n_marker
            mass = s if j == k else (1 - s) * spec.cross_talk / (A - 1)
            if spec.n_marker:
                p[lo:lo + spec.n_marker] = mass / spec.n_marker
        return p / p.sum()

    def min_tv_distance(self) -> float:
        A = len(self.spec.attributes)
        dists = [self.word_distribution(k) for k in range(A)]
        return min(0.5 * np.abs(dists[i] - dists[j]).sum() for i in range(A) for j in range(i + 1, A))

    def sample_text(self, k: int, rng: np.random.Generator) -> str:
        spec = self.spec
        A = len(spec.attributes)
        s = rng.uniform(*spec.strength)
        n = int(rng.integers(spec.words_per_text[0], spec.words_per_text[1] + 1))
        out = []
        for _ in range(n):
            u = rng.random()
            if u < s:
                block = self.markers[k]
            elif u < s + (1 - s) * spec.cross_talk:
                others = [j for j in range(A) if j != k]
                block = self.markers[others[int(rng.integers(len(others)))]]
            else:
                block = self.shared
            out.append(block[int(rng.integers(len(block)))])
        return " ".join(out)

    def prompts(self, n: int, n_words: int = 2, seed: int = 0) -> list[str]:
        """Attribute-neutral prompts built from shared filler words (trailing space)."""
        rng = np.random.default_rng([self.spec.seed, 7, seed])
        out = []
        for _ in range(n):
            ws = [self.shared[int(rng.integers(len(self.shared)))] for _ in range(n_words)]
            out.append(" ".join(ws) + " ")
        return out


def _draw(world: SyntheticWorld, n: int, stream: int) -> list[CorpusRecord]:
    spec = world.spec
    rng = np.random.default_rng([spec.seed, 1, stream])
    # label-balanced: cycle through attributes, then shuffle order
    labels = np.arange(n) % len(spec.attributes)
    rng.shuffle(labels)
    return [CorpusRecord(world.sample_text(int(k), rng), spec.attributes[k]) for k in labels]


def make_synthetic(spec: SyntheticSpec) -> tuple[list[CorpusRecord], list[CorpusRecord], list[CorpusRecord]]:
    """Labeled, unlabeled (labels stripped) and held-out corpora; a pure function of ``spec``."""
    world = SyntheticWorld.build(spec)
    tv = world.min_tv_distance()
    if tv < spec.tv_floor:
        raise ValueError(f"attribute distributions too similar: min total-variation {tv:.3f} < floor {spec.tv_floor}")
    labeled = _draw(world, spec.n_labeled, 0)
    unlabeled = [CorpusRecord(r.text) for r in _draw(world, spec.n_unlabeled, 1)]
    heldout = _draw(world, spec.n_heldout, 2)
    return labeled, unlabeled, heldout


def unlabeled_truth(spec: SyntheticSpec) -> list[CorpusRecord]:
    """The unlabeled split with its hidden generating labels kept (diagnostics only)."""
    return _draw(SyntheticWorld.build(spec), spec.n_unlabeled, 1)
