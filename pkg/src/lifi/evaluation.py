"""Automatic metrics: relevance, correctness, perplexity and Dist-n."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

from .classifier import AttributeClassifier
from .transformer import Transformer
from .vocab import TokenizeError, Vocab


class EmptyGenerationsError(ValueError):
    pass


def _need(generations: Sequence) -> None:
    if len(generations) == 0:
        raise EmptyGenerationsError("no generations to score")


def relevance_from_probs(probs: np.ndarray, target: int) -> float:
    """Mean probability of ``target`` over rows of ``probs``, in percent."""
    probs = np.asarray(probs, dtype=np.float64)
    _need(probs)
    return float(probs[:, target].mean() * 100.0)


def correctness_from_probs(probs: np.ndarray, target: int) -> float:
    """Percentage of rows whose argmax is ``target``."""
    probs = np.asarray(probs, dtype=np.float64)
    _need(probs)
    hits = int(np.count_nonzero(probs.argmax(axis=1) == target))
    return 100.0 * hits / len(probs)


def relevance(generations: Sequence[str], target: int, judge: AttributeClassifier) -> float:
    _need(generations)
    return relevance_from_probs(judge.predict_proba(generations), target)


def correctness(generations: Sequence[str], target: int, judge: AttributeClassifier) -> float:
    _need(generations)
    return correctness_from_probs(judge.predict_proba(generations), target)


def perplexity(texts: Sequence[str], scoring_lm: Transformer, vocab: Vocab) -> float:
    """Mean over texts of ``exp(mean token NLL)``; each text is scored after a BOS token."""
    _need(texts)
    values = []
    for i, text in enumerate(texts):
        try:
            ids = vocab.encode(text, bos=True)
        except TokenizeError as e:
            raise TokenizeError(f"text {i}: {e}") from None
        if len(ids) < 2:
            raise TokenizeError(f"text {i}: empty text cannot be scored")
        ids = ids[: scoring_lm.cfg.n_ctx + 1]
        values.append(np.exp(float(scoring_lm.loss(ids).data)))
    return float(np.mean(values))


def ngrams(tokens: Sequence, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def dist_n(generations: Sequence[Sequence], n: int) -> float:
    """Distinct n-grams over total n-grams, pooled across all generations.

    Strings are treated as character sequences.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    _need(generations)
    distinct: set[tuple] = set()
    total = 0
    for g in generations:
        grams = ngrams(list(g), n)
        total += len(grams)
        distinct.update(grams)
    if total == 0:
        raise ValueError(f"every generation is shorter than {n} tokens")
    return len(distinct) / total


@dataclass
class EvalReport:
    attribute: str
    relevance: float
    correctness: float
    ppl: float
    dist1: float
    dist2: float
    dist3: float
    n: int = 0

    def __post_init__(self):
        for name in ("relevance", "correctness"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} {v} outside [0, 100]")
        for name in ("dist1", "dist2", "dist3"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} {v} outside [0, 1]")
        if not self.ppl >= 1:
            raise ValueError(f"perplexity {self.ppl} below 1")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_attribute(attribute: str, target: int, continuations: Sequence[str], judge: AttributeClassifier,
                       scoring_lm: Transformer | None, vocab: Vocab, ppl_texts: Sequence[str] | None = None) -> EvalReport:
    probs = judge.predict_proba(continuations)
    ppl = perplexity(ppl_texts if ppl_texts is not None else continuations, scoring_lm, vocab) if scoring_lm else 1.0
    return EvalReport(
        attribute=attribute,
        relevance=relevance_from_probs(probs, target),
        correctness=correctness_from_probs(probs, target),
        ppl=ppl,
        dist1=dist_n(continuations, 1),
        dist2=dist_n(continuations, 2),
        dist3=dist_n(continuations, 3),
        n=len(continuations),
    )


def round2(x: float) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def render_report(reports: Sequence[EvalReport]) -> str:
    """Aligned table, one row per attribute plus an ``Average`` row.

    Relevance and correctness averages carry ``± population std``.
    """
    if not reports:
        raise ValueError("need at least one attribute report")
    cols = ["Attribute", "Relevance", "Correctness", "PPL", "Dist-1", "Dist-2", "Dist-3"]
    rows = [[r.attribute, round2(r.relevance), round2(r.correctness), round2(r.ppl),
             round2(r.dist1), round2(r.dist2), round2(r.dist3)] for r in reports]
    avg = ["Average"]
    for name in ("relevance", "correctness"):
        m, s = mean_std([getattr(r, name) for r in reports])
        avg.append(f"{round2(m)} ± {round2(s)}")
    for name in ("ppl", "dist1", "dist2", "dist3"):
        avg.append(round2(mean_std([getattr(r, name) for r in reports])[0]))
    rows.append(avg)
    widths = [max(len(str(x)) for x in col) for col in zip(cols, *rows)]

    def line(cells):
        return "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    sep = "-" * len(line(cols))
    return "\n".join([line(cols), sep, *(line(r) for r in rows[:-1]), sep, line(rows[-1])]) + "\n"
