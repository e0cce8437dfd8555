"""Attribute classifier whose pre-softmax logits serve as control codes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batching import length_batches
from .fusion import ControlCode
from .optim import AdamW
from .transformer import ModelConfig, Transformer, param_count
from .vocab import Vocab

log = logging.getLogger(__name__)


class ClassifierNotTrainedError(RuntimeError):
    pass


@dataclass
class StageConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    # "constant" or "cosine" (decay to lr * min_lr_ratio over the stage)
    schedule: str = "constant"
    min_lr_ratio: float = 0.1
    # classifier only: each epoch a text is replaced by a random window of
    # crop_len characters with probability crop_prob (0 disables)
    crop_len: int = 0
    crop_prob: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        if self.schedule == "constant" or total <= 1:
            return self.lr
        frac = min(step / (total - 1), 1.0)
        lo = self.lr * self.min_lr_ratio
        return lo + 0.5 * (self.lr - lo) * (1 + np.cos(np.pi * frac))


def default_encoder_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(n_layers=2, d_model=64, n_heads=4, vocab_size=vocab_size, n_ctx=64)


class AttributeClassifier:
    """Bidirectional transformer encoder, mean pooling, linear read-out ``W_cls``."""

    def __init__(self, vocab: Vocab, attributes: Sequence[str], cfg: ModelConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        self.vocab = vocab
        self.attributes = list(attributes)
        self.cfg = cfg or default_encoder_config(len(vocab))
        if self.cfg.vocab_size != len(vocab):
            raise ValueError(f"encoder vocab_size {self.cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.encoder = Transformer(self.cfg, seed=seed, dtype=dtype, causal=False)
        rng = np.random.default_rng([seed, 99])
        self.w_cls = Tensor(rng.normal(0, 0.02, size=(self.cfg.d_model, len(self.attributes))).astype(dtype),
                            name="w_cls")
        self.trained = False

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder/{k}": v for k, v in self.encoder.params.items()}
        out["w_cls"] = self.w_cls
        return out

    def num_encoder_params(self) -> int:
        return self.encoder.num_params()

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag
            t.grad = None

    def astype(self, dtype) -> "AttributeClassifier":
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
        return self

    # ------------------------------------------------------------ forward

    def tokenize(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot classify an empty text")
        return self.vocab.encode(text[: self.cfg.n_ctx], bos=False, strict=False)

    def pooled(self, ids) -> Tensor:
        """Mean of final-layer states, ``[B, d]``."""
        h = self.encoder.hidden(ids)
        return ad.mean(h, axis=1)

    def logits(self, ids) -> Tensor:
        return ad.matmul(self.pooled(ids), self.w_cls)

    def encode(self, text: str) -> np.ndarray:
        return self.pooled(self.tokenize(text)[None, :]).data[0]

    def _batched_logits(self, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
        ids = [self.tokenize(t) for t in texts]
        out = np.zeros((len(texts), self.n_attributes), dtype=np.float64)
        for b in length_batches([len(x) for x in ids], batch_size):
            out[b] = self.logits(np.stack([ids[i] for i in b])).data
        return out

    def _require_trained(self) -> None:
        if not self.trained:
            raise ClassifierNotTrainedError("classifier has not been trained or loaded")

    def control_codes(self, texts: Sequence[str]) -> np.ndarray:
        """Raw logits ``W_cls x`` for each text, ``[N, |A|]``; no softmax."""
        self._require_trained()
        return self._batched_logits(texts)

    def control_code(self, text: str) -> ControlCode:
        return ControlCode(self.control_codes([text])[0])

    def predict_proba(self, texts: Sequence[str]) -> np.ndarray:
        c = self.control_codes(texts)
        z = np.exp(c - c.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, texts: Sequence[str]) -> np.ndarray:
        return self.control_codes(texts).argmax(axis=1)

    def accuracy(self, texts: Sequence[str], labels: Sequence[int]) -> float:
        if not len(texts):
            return float("nan")
        return float(np.mean(self.predict(texts) == np.asarray(labels)))


@dataclass
class ClassifierReport:
    epoch_losses: list[float] = field(default_factory=list)
    heldout_accuracy: float | None = None


def train_classifier(texts: Sequence[str], labels: Sequence[int], vocab: Vocab, attributes: Sequence[str],
                     hp: StageConfig | None = None, cfg: ModelConfig | None = None, seed: int = 0,
                     heldout: tuple[Sequence[str], Sequence[int]] | None = None,
                     dtype=np.float32) -> tuple[AttributeClassifier, ClassifierReport]:
    """Cross-entropy training on labeled texts; labels are attribute indices."""
    hp = hp or StageConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if len(texts) != len(labels):
        raise ValueError("texts and labels differ in length")
    if len(np.unique(labels)) < 2:
        raise ValueError("classifier training needs at least two distinct labels")
    if labels.min() < 0 or labels.max() >= len(attributes):
        raise ValueError("label index out of range")
    clf = AttributeClassifier(vocab, attributes, cfg, seed=seed, dtype=dtype)
    n = clf.encoder.num_params()
    assert n == param_count(clf.cfg), "encoder parameter count does not match its closed form"
    clf.set_requires_grad(True)
    params = list(clf.parameters().values())
    opt = AdamW(params, lr=hp.lr, weight_decay=hp.weight_decay, clip_norm=hp.clip_norm)
    full = [clf.tokenize(t) for t in texts]
    rng = np.random.default_rng([seed, 11])
    report = ClassifierReport()
    for epoch in range(hp.epochs):
        ids = _crops(full, hp, rng) if hp.crop_len else full
        total, count = 0.0, 0
        for b in length_batches([len(x) for x in ids], hp.batch_size, rng):
            batch = np.stack([ids[i] for i in b])
            with ad.Tape() as tape:
                loss = ad.cross_entropy(clf.logits(batch), labels[b])
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            total += float(loss.data) * len(b)
            count += len(b)
        report.epoch_losses.append(total / max(count, 1))
        log.info("classifier epoch %d loss %.4f", epoch, report.epoch_losses[-1])
    clf.set_requires_grad(False)
    clf.trained = True
    if heldout is not None:
        report.heldout_accuracy = clf.accuracy(*heldout)
    return clf, report


def _crops(full: list[np.ndarray], hp: StageConfig, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for x in full:
        if len(x) > hp.crop_len and rng.random() < hp.crop_prob:
            start = int(rng.integers(0, len(x) - hp.crop_len + 1))
            x = x[start:start + hp.crop_len]
        out.append(x)
    return out


def pseudo_label(clf: AttributeClassifier, texts: Sequence[str]) -> list[tuple[str, ControlCode]]:
    """Attach the classifier's full logit vector to every text."""
    if not len(texts):
        return []
    codes = clf.control_codes(texts)
    return [(t, ControlCode(c)) for t, c in zip(texts, codes)]
