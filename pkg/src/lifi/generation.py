"""Controlled sampling with top-k truncation.

Randomness: every continuation owns a PCG64 stream seeded from
``(seed, prompt index, sample index)`` through numpy's ``SeedSequence``, so
results do not depend on how prompts are batched or parallelised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fusion import AdapterFusion, make_test_code
from .transformer import Transformer
from .vocab import SPECIALS, Vocab

DEFAULT_ALPHA = 4.0
ALPHA_GRID = (0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class GenerationParams:
    prompt: str
    target: int
    alpha: float = DEFAULT_ALPHA
    k: int = 50
    max_new_tokens: int = 30
    seed: int = 0
    temperature_sampling: float = 1.0
    num: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not self.temperature_sampling > 0:
            raise ValueError("sampling temperature must be positive")
        if self.num < 1:
            raise ValueError("num must be >= 1")


@dataclass
class Continuation:
    prompt: str
    text: str
    token_ids: list[int] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)


def stream(seed: int, prompt_index: int, sample_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, prompt_index, sample_index])))


def top_k_probs(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Ids of the ``k`` highest logits (ties broken by lower id) and their renormalised probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    V = logits.shape[-1]
    if k > V:
        raise ValueError(f"k={k} exceeds vocabulary size {V}")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-logits, kind="stable")[:k]
    z = logits[order]
    z = z - z.max()
    p = np.exp(z)
    return order, p / p.sum()


def top_k_sample(logits: np.ndarray, k: int, rng: np.random.Generator) -> int:
    ids, p = top_k_probs(logits, k)
    if k == 1:
        return int(ids[0])
    return int(ids[rng.choice(len(ids), p=p)])


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_continuations(model: Transformer, vocab: Vocab, prompts: Sequence[str], target: int | None = None,
                         alpha: float = DEFAULT_ALPHA, fusion: AdapterFusion | None = None, k: int = 50,
                         max_new_tokens: int = 30, num: int = 5, seed: int = 0,
                         temperature: float = 1.0,
                         prompt_indices: Sequence[int] | None = None) -> list[list[Continuation]]:
    """``num`` continuations for every prompt; one list per prompt.

    With ``fusion`` and ``target`` the test-time code ``alpha * e_target``
    drives the adapters; otherwise the base model samples on its own.
    Special tokens are never emitted, so each continuation has exactly
    ``max_new_tokens`` tokens.  ``k`` above the number of emittable tokens
    means no truncation.  ``prompt_indices`` overrides the index used to
    derive each prompt's random streams (default: position in ``prompts``).
    """
    n_ctx = model.cfg.n_ctx
    indices = list(range(len(prompts))) if prompt_indices is None else list(prompt_indices)
    if len(indices) != len(prompts):
        raise ValueError("prompt_indices must match prompts")
    code = None
    if fusion is not None and target is not None:
        code = make_test_code(target, alpha, fusion.n_attributes).values
    encoded = []
    for i, p in enumerate(prompts):
        ids = vocab.encode(p, bos=True)
        if len(ids) >= n_ctx:
            raise ValueError(f"prompt {i} has {len(ids)} tokens; it must be shorter than n_ctx={n_ctx}")
        encoded.append(ids)
    V = model.cfg.vocab_size
    banned = np.arange(len(SPECIALS))
    k_eff = min(k, V - len(banned))
    results: list[list[Continuation]] = [[] for _ in prompts]
    # prompts of equal length share a batch; rows are (prompt, sample) pairs
    by_len: dict[int, list[int]] = {}
    for i, ids in enumerate(encoded):
        by_len.setdefault(len(ids), []).append(i)
    for _, members in sorted(by_len.items()):
        rows = [(i, s) for i in members for s in range(num)]
        seqs = np.stack([encoded[i] for i, _ in rows])
        rngs = [stream(seed, indices[i], s) for i, s in rows]
        new = np.zeros((len(rows), max_new_tokens), dtype=np.int64)
        lps = np.zeros((len(rows), max_new_tokens))
        for t in range(max_new_tokens):
            window = seqs[:, -n_ctx:]
            logits = model.logits(window, code=code, fusion=fusion).data[:, -1, :].astype(np.float64)
            logits = logits / temperature
            full = _log_softmax(logits)
            logits[:, banned] = -np.inf
            for r in range(len(rows)):
                tok = top_k_sample(logits[r], k_eff, rngs[r])
                new[r, t] = tok
                lps[r, t] = full[r, tok]
            seqs = np.concatenate([seqs, new[:, t:t + 1]], axis=1)
        for r, (i, s) in enumerate(rows):
            ids = new[r].tolist()
            results[i].append(Continuation(prompts[i], vocab.decode(ids), ids, lps[r].tolist()))
    return results


def generate(model: Transformer, vocab: Vocab, fusion: AdapterFusion | None, params: GenerationParams,
             prompt_index: int = 0) -> list[Continuation]:
    """``params.num`` controlled continuations of ``params.prompt``."""
    return sample_continuations(model, vocab, [params.prompt], target=params.target, alpha=params.alpha,
                                fusion=fusion, k=params.k, max_new_tokens=params.max_new_tokens,
                                num=params.num, seed=params.seed, temperature=params.temperature_sampling,
                                prompt_indices=[prompt_index])[0]


def alpha_sweep(model: Transformer, fusion: AdapterFusion, vocab: Vocab, attributes: Sequence[str],
                prompts: Sequence[str], judge, scoring_lm: Transformer | None, grid: Sequence[float] = ALPHA_GRID,
                k: int = 50, num: int = 5, max_new_tokens: int = 30, seed: int = 0) -> list[dict]:
    """Correctness, relevance and perplexity averaged over attributes, one row per grid value.

    Prompts and seeds are held fixed across the grid.
    """
    from .evaluation import evaluate_attribute

    grid = list(grid)
    if not grid or any(not a > 0 for a in grid):
        raise ValueError("alpha grid must be nonempty and positive")
    table = []
    for alpha in grid:
        reports = []
        for target, name in enumerate(attributes):
            rows = sample_continuations(model, vocab, prompts, target=target, alpha=alpha, fusion=fusion, k=k,
                                        max_new_tokens=max_new_tokens, num=num, seed=seed)
            texts = [c.text for row in rows for c in row]
            reports.append(evaluate_attribute(name, target, texts, judge, scoring_lm, vocab))
        table.append({
            "alpha": float(alpha),
            "correctness": float(np.mean([r.correctness for r in reports])),
            "relevance": float(np.mean([r.relevance for r in reports])),
            "ppl": float(np.mean([r.ppl for r in reports])),
            "per_attribute": [r.correctness for r in reports],
        })
    return table
