"""Three-stage training flow and the run manifest.

Stages, in order:

1. ``base``: pretrain the causal LM on every training text (labels unused).
2. ``classifier``: train the code classifier on the labeled split.
3. ``adapters``: code the labeled texts plus a fraction ``rho`` of the
   unlabeled texts with the classifier, then train adapters and fusion
   temperatures on the frozen base LM.

Each stage writes its checkpoint into the run directory and the next stage
reads it back from disk, so a missing upstream artifact surfaces as
:class:`MissingDependencyError`.  Evaluation instruments (an independent
judge classifier and a scoring LM) are trained from the held-out split and
the full corpus, seeded by ``evaluation.instrument_seed`` and optionally
cached by fingerprint so several runs can share them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterBank, count_extra_params
from .artifacts import load_classifier, load_fusion, load_lm, save_classifier, save_fusion, save_lm
from .batching import length_batches
from .classifier import AttributeClassifier, StageConfig, pseudo_label, train_classifier
from .config import EvalConfig, RunConfig
from .data import (CorpusRecord, SyntheticWorld, corpus_fingerprint, load_corpus, make_synthetic, preset,
                   save_coded, save_corpus)
from .evaluation import EvalReport, evaluate_attribute, render_report
from .fusion import AdapterFusion, FusionGate
from .generation import alpha_sweep, sample_continuations
from .optim import AdamW
from .transformer import ModelConfig, Transformer, params_checksum
from .vocab import Vocab

log = logging.getLogger(__name__)

STAGES = ("base", "classifier", "adapters")


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class MissingDependencyError(FileNotFoundError):
    pass


class FrozenBaseViolation(RuntimeError):
    pass


def derive_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


# ---------------------------------------------------------------- sequences and NLL

def encode_texts(vocab: Vocab, texts: Sequence[str], n_ctx: int) -> list[np.ndarray]:
    """BOS + text + EOS, cut to ``n_ctx + 1`` tokens (inputs never exceed the context)."""
    return [vocab.encode(t, bos=True, eos=True, strict=False)[: n_ctx + 1] for t in texts]


def corpus_nll(model: Transformer, seqs: Sequence[np.ndarray], codes: np.ndarray | None = None,
               fusion: AdapterFusion | None = None, batch_size: int = 64) -> float:
    """Token-weighted mean next-token NLL over ``seqs``; forward only."""
    total, count = 0.0, 0
    for b in length_batches([len(s) for s in seqs], batch_size):
        ids = np.stack([seqs[i] for i in b])
        code = codes[b] if codes is not None else None
        loss = model.loss(ids, code=code, fusion=fusion)
        n_tok = len(b) * (ids.shape[1] - 1)
        total += float(loss.data) * n_tok
        count += n_tok
    return total / count


# ---------------------------------------------------------------- stage 1

@dataclass
class BaseReport:
    checkpoints: list[dict] = field(default_factory=list)  # {"checkpoint", "step", "heldout_nll"}
    epoch_losses: list[float] = field(default_factory=list)


def pretrain_base(texts: Sequence[str], vocab: Vocab, cfg: ModelConfig, hp: StageConfig | None = None,
                  seed: int = 0, heldout_texts: Sequence[str] | None = None,
                  evals_per_epoch: int = 1) -> tuple[Transformer, BaseReport]:
    """Train a causal LM from scratch.

    Held-out NLL is logged at checkpoint 0 (initialisation) and then
    ``evals_per_epoch`` times per epoch.
    """
    hp = hp or StageConfig(lr=3e-4)
    if not texts:
        raise ValueError("base pretraining needs a nonempty corpus")
    if sum(len(t) for t in texts) < cfg.n_ctx:
        raise ValueError(f"corpus has fewer characters than one context window ({cfg.n_ctx})")
    model = Transformer(cfg, seed=derive_seed(seed, 1))
    model.unfreeze()
    seqs = encode_texts(vocab, texts, cfg.n_ctx)
    held = encode_texts(vocab, heldout_texts, cfg.n_ctx) if heldout_texts else None
    opt = AdamW(list(model.params.values()), lr=hp.lr, weight_decay=hp.weight_decay, clip_norm=hp.clip_norm)
    rng = np.random.default_rng(derive_seed(seed, 2))
    report = BaseReport()

    def checkpoint(step: int) -> None:
        if held is not None:
            nll = corpus_nll(model, held)
            report.checkpoints.append({"checkpoint": len(report.checkpoints), "step": step, "heldout_nll": nll})
            log.info("base checkpoint %d step %d held-out NLL %.4f", len(report.checkpoints) - 1, step, nll)

    checkpoint(0)
    step = 0
    total_steps = hp.epochs * len(length_batches([len(s) for s in seqs], hp.batch_size))
    for _ in range(hp.epochs):
        batches = length_batches([len(s) for s in seqs], hp.batch_size, rng)
        marks = {int(round(len(batches) * (j + 1) / evals_per_epoch)) for j in range(evals_per_epoch)}
        total, count = 0.0, 0
        for i, b in enumerate(batches, 1):
            ids = np.stack([seqs[j] for j in b])
            opt.lr = hp.lr_at(step, total_steps)
            with ad.Tape() as tape:
                loss = model.loss(ids)
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            step += 1
            total += float(loss.data) * len(b)
            count += len(b)
            if i in marks:
                checkpoint(step)
        report.epoch_losses.append(total / count)
    model.freeze()
    return model, report


# ---------------------------------------------------------------- stage 3

@dataclass
class AdapterReport:
    coded_nll: list[float] = field(default_factory=list)  # index 0 is before training
    epoch_losses: list[float] = field(default_factory=list)
    base_checksum_before: str = ""
    base_checksum_after: str = ""


def train_adapters(base: Transformer, fusion: AdapterFusion, coded: Sequence[tuple[str, Sequence[float]]],
                   vocab: Vocab, hp: StageConfig | None = None, seed: int = 0,
                   eval_size: int = 256) -> tuple[AdapterFusion, AdapterReport]:
    """Plain next-token NLL under each text's control code; only adapters and temperatures learn.

    Any gradient reaching a base parameter raises :class:`FrozenBaseViolation`.
    ``coded_nll`` tracks the NLL of the first ``eval_size`` coded texts
    before training and after every epoch.
    """
    hp = hp or StageConfig(lr=1e-3)
    if not coded:
        raise ValueError("adapter training needs a nonempty coded corpus")
    texts = [t for t, _ in coded]
    codes = np.stack([np.asarray(c, dtype=np.float64) for _, c in coded])
    if codes.shape[1] != fusion.n_attributes:
        raise ValueError(f"codes have {codes.shape[1]} entries, fusion has {fusion.n_attributes} attributes")
    base.freeze()
    report = AdapterReport(base_checksum_before=base.checksum())
    base_params = list(base.params.values())
    trainable = fusion.parameters()
    for t in trainable.values():
        t.requires_grad = True
    opt = AdamW(list(trainable.values()), lr=hp.lr, weight_decay=hp.weight_decay, clip_norm=hp.clip_norm)
    seqs = encode_texts(vocab, texts, base.cfg.n_ctx)
    ev = slice(0, min(eval_size, len(seqs)))
    report.coded_nll.append(corpus_nll(base, seqs[ev], codes[ev], fusion))
    rng = np.random.default_rng(derive_seed(seed, 3))
    for epoch in range(hp.epochs):
        total, count = 0.0, 0
        for b in length_batches([len(s) for s in seqs], hp.batch_size, rng):
            ids = np.stack([seqs[j] for j in b])
            with ad.Tape() as tape:
                loss = base.loss(ids, code=codes[b], fusion=fusion)
            tape.backward(loss)
            leaked = [p.name for p in base_params if p.grad is not None]
            if leaked:
                raise FrozenBaseViolation(f"gradient reached frozen base parameters: {leaked[:3]}")
            opt.step()
            opt.zero_grad()
            total += float(loss.data) * len(b)
            count += len(b)
        report.epoch_losses.append(total / count)
        report.coded_nll.append(corpus_nll(base, seqs[ev], codes[ev], fusion))
        log.info("adapters epoch %d loss %.4f coded NLL %.4f", epoch, report.epoch_losses[-1], report.coded_nll[-1])
    for t in trainable.values():
        t.requires_grad = False
        t.grad = None
    report.base_checksum_after = base.checksum()
    if report.base_checksum_after != report.base_checksum_before:
        raise FrozenBaseViolation("base parameters changed during adapter training")
    return fusion, report


def new_fusion(attributes: Sequence[str], cfg: ModelConfig, r_ffn: int, seed: int) -> AdapterFusion:
    bank = AdapterBank(attributes, cfg, r_ffn=r_ffn).init(seed=derive_seed(seed, 4))
    return AdapterFusion(bank, FusionGate(cfg.n_layers))


def coded_corpus(clf: AttributeClassifier, labeled: Sequence[str], unlabeled: Sequence[str],
                 rho: float) -> list[tuple[str, np.ndarray]]:
    """Labeled texts plus the first ``floor(rho * N)`` unlabeled texts, each with its classifier code."""
    n = int(np.floor(rho * len(unlabeled) + 1e-9))
    return [(t, c.values) for t, c in pseudo_label(clf, list(labeled) + list(unlabeled[:n]))]


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    config: dict = field(default_factory=dict)
    stages: list[str] = field(default_factory=list)
    checksums: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)
    parameters: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Everything except wall-clock timings; equal across reruns of one config."""
        d = self.to_dict()
        d.pop("timings")
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- data

@dataclass
class RunData:
    attributes: list[str]
    labeled: list[CorpusRecord]
    unlabeled: list[CorpusRecord]
    heldout: list[CorpusRecord]
    vocab: Vocab
    prompts: list[str]

    @property
    def train_texts(self) -> list[str]:
        return [r.text for r in self.labeled] + [r.text for r in self.unlabeled]

    def labels(self, records: Sequence[CorpusRecord]) -> list[int]:
        return [self.attributes.index(r.label) for r in records]


def prepare_data(config: RunConfig) -> RunData:
    d = config.data
    if d.preset is not None:
        spec = preset(d.preset, **d.synthetic)
        labeled, unlabeled, heldout = make_synthetic(spec)
        attributes = list(spec.attributes)
        prompts = d.prompts or SyntheticWorld.build(spec).prompts(d.n_prompts)
    else:
        attributes = list(d.attributes)
        labeled = load_corpus(d.labeled, attributes)
        unlabeled = load_corpus(d.unlabeled, attributes) if d.unlabeled else []
        heldout = load_corpus(d.heldout, attributes) if d.heldout else []
        if any(r.label is None for r in labeled):
            raise ValueError("every record of the labeled corpus needs a label")
        if not d.prompts:
            raise ValueError("[data] prompts are required when corpora are given as files")
        prompts = list(d.prompts)
    vocab = Vocab.from_texts([r.text for r in labeled + unlabeled + heldout] + list(prompts))
    return RunData(attributes, labeled, unlabeled, heldout, vocab, prompts)


# ---------------------------------------------------------------- evaluation instruments

@dataclass
class Instruments:
    judge: AttributeClassifier
    scoring_lm: Transformer
    judge_fingerprint: str


def _instrument_key(data: RunData, config: RunConfig) -> str:
    e = config.evaluation
    blob = json.dumps({
        "heldout": corpus_fingerprint(data.heldout),
        "train": corpus_fingerprint(data.labeled + data.unlabeled),
        "vocab": data.vocab.to_dict(), "model": asdict(config.model), "classifier": asdict(config.classifier),
        "judge": asdict(e.judge), "scoring": asdict(e.scoring), "seed": e.instrument_seed,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_instruments(data: RunData, config: RunConfig, out_dir: Path) -> Instruments:
    """Judge classifier on the held-out split, scoring LM on the full corpus; cached by fingerprint."""
    e = config.evaluation
    if not data.heldout or any(r.label is None for r in data.heldout):
        raise ValueError("evaluation needs a labeled held-out split to train the judge")
    cache = Path(e.cache_dir) if e.cache_dir else out_dir
    cache.mkdir(parents=True, exist_ok=True)
    key = _instrument_key(data, config)
    judge_path, lm_path = cache / f"judge-{key}.ckpt", cache / f"scoring-{key}.ckpt"
    if judge_path.exists():
        judge, _ = load_classifier(judge_path)
    else:
        judge, _ = train_classifier([r.text for r in data.heldout], data.labels(data.heldout), data.vocab,
                                    data.attributes, e.judge, _clf_cfg(config, data.vocab),
                                    seed=derive_seed(e.instrument_seed, 21))
        save_classifier(judge_path, judge)
    if lm_path.exists():
        scoring, _, _ = load_lm(lm_path)
    else:
        scoring, _ = pretrain_base(data.train_texts + [r.text for r in data.heldout], data.vocab,
                                   _lm_cfg(config, data.vocab), e.scoring, seed=derive_seed(e.instrument_seed, 22))
        save_lm(lm_path, scoring, data.vocab)
    return Instruments(judge, scoring, corpus_fingerprint(data.heldout))


def _lm_cfg(config: RunConfig, vocab: Vocab) -> ModelConfig:
    m = config.model
    return ModelConfig(n_layers=m.n_layers, d_model=m.d_model, n_heads=m.n_heads, vocab_size=len(vocab),
                       n_ctx=m.n_ctx, d_ff=m.d_ff)


def _clf_cfg(config: RunConfig, vocab: Vocab) -> ModelConfig:
    c = config.classifier
    return ModelConfig(n_layers=c.n_layers, d_model=c.d_model, n_heads=c.n_heads, vocab_size=len(vocab),
                       n_ctx=c.n_ctx)


def evaluate_controlled(base: Transformer, fusion: AdapterFusion | None, vocab: Vocab, attributes: Sequence[str],
                        prompts: Sequence[str], inst: Instruments, e: EvalConfig, seed: int,
                        alpha: float | None = None) -> list[EvalReport]:
    """One report per attribute; without ``fusion`` the base LM's samples are judged against every target."""
    alpha = e.alpha if alpha is None else alpha
    reports = []
    shared = None
    if fusion is None:
        shared = [c.text for row in sample_continuations(base, vocab, prompts, k=e.k, max_new_tokens=e.length,
                                                         num=e.num, seed=seed) for c in row]
    for k, name in enumerate(attributes):
        if shared is None:
            rows = sample_continuations(base, vocab, prompts, target=k, alpha=alpha, fusion=fusion, k=e.k,
                                        max_new_tokens=e.length, num=e.num, seed=seed)
            texts = [c.text for row in rows for c in row]
        else:
            texts = shared
        reports.append(evaluate_attribute(name, k, texts, inst.judge, inst.scoring_lm, vocab))
    return reports


# ---------------------------------------------------------------- orchestration

def _stage(name: str, manifest: RunManifest, fn):
    t0 = time.perf_counter()
    try:
        out = fn()
    except Exception as e:
        raise PipelineError(name, e) from e
    manifest.timings[name] = round(time.perf_counter() - t0, 3)
    return out


def run_stage_base(data: RunData, config: RunConfig, out: Path, manifest: RunManifest) -> None:
    model, rep = pretrain_base(data.train_texts, data.vocab, _lm_cfg(config, data.vocab), config.train.base,
                               seed=config.seed, heldout_texts=[r.text for r in data.heldout] or None)
    save_lm(out / "base.ckpt", model, data.vocab)
    manifest.checksums["base"] = model.checksum()
    manifest.metrics["base"] = asdict(rep)
    manifest.stages.append("base")


def run_stage_classifier(data: RunData, config: RunConfig, out: Path, manifest: RunManifest) -> None:
    held = (([r.text for r in data.heldout], data.labels(data.heldout)) if data.heldout else None)
    clf, rep = train_classifier([r.text for r in data.labeled], data.labels(data.labeled), data.vocab,
                                data.attributes, config.train.classifier, _clf_cfg(config, data.vocab),
                                seed=derive_seed(config.seed, 5), heldout=held)
    save_classifier(out / "classifier.ckpt", clf)
    manifest.checksums["classifier"] = params_checksum(clf.parameters())
    manifest.metrics["classifier"] = asdict(rep)
    manifest.stages.append("classifier")


def run_stage_adapters(data: RunData, config: RunConfig, out: Path, manifest: RunManifest,
                       rho: float | None = None) -> None:
    for dep in ("base.ckpt", "classifier.ckpt"):
        if not (out / dep).exists():
            raise MissingDependencyError(f"adapter stage needs {out / dep}, which does not exist")
    base, _, _ = load_lm(out / "base.ckpt")
    clf, _ = load_classifier(out / "classifier.ckpt")
    rho = config.train.unlabeled_fraction if rho is None else rho
    coded = coded_corpus(clf, [r.text for r in data.labeled], [r.text for r in data.unlabeled], rho)
    save_coded(out / "coded.jsonl", coded)
    fusion = new_fusion(data.attributes, base.cfg, config.adapters.r_ffn, config.seed)
    fusion, rep = train_adapters(base, fusion, coded, data.vocab, config.train.adapters, seed=config.seed)
    save_fusion(out / "adapters.ckpt", fusion, base.cfg)
    manifest.checksums["base_before_adapters"] = rep.base_checksum_before
    manifest.checksums["base_after_adapters"] = rep.base_checksum_after
    manifest.checksums["base_frozen_match"] = rep.base_checksum_before == rep.base_checksum_after
    manifest.checksums["adapters"] = params_checksum(fusion.parameters())
    manifest.metrics["adapters"] = {**asdict(rep), "n_coded": len(coded), "rho": rho}
    extra = count_extra_params(fusion.bank, base.cfg)
    manifest.parameters = {"base": base.num_params(), "extra": extra, "overhead_fraction": extra / base.num_params(),
                           "allocated": sum(t.size for t in fusion.parameters().values())}
    manifest.stages.append("adapters")


def run_evaluation(data: RunData, config: RunConfig, out: Path, manifest: RunManifest) -> None:
    e = config.evaluation
    for dep in ("base.ckpt", "adapters.ckpt"):
        if not (out / dep).exists():
            raise MissingDependencyError(f"evaluation needs {out / dep}, which does not exist")
    inst = build_instruments(data, config, out)
    base, _, _ = load_lm(out / "base.ckpt")
    fusion, _ = load_fusion(out / "adapters.ckpt")
    seed = derive_seed(config.seed, 6)
    controlled = evaluate_controlled(base, fusion, data.vocab, data.attributes, data.prompts, inst, e, seed)
    uncontrolled = evaluate_controlled(base, None, data.vocab, data.attributes, data.prompts, inst, e, seed)
    manifest.fingerprints["judge_split"] = inst.judge_fingerprint
    manifest.metrics["judge_accuracy_on_labeled_split"] = inst.judge.accuracy(
        [r.text for r in data.labeled], data.labels(data.labeled))
    manifest.metrics["controlled"] = [r.to_dict() for r in controlled]
    manifest.metrics["base_lm"] = [r.to_dict() for r in uncontrolled]
    (out / "report.txt").write_text(render_report(controlled))
    if e.sweep:
        table = alpha_sweep(base, fusion, data.vocab, data.attributes, data.prompts, inst.judge, inst.scoring_lm,
                            grid=e.alpha_grid, k=e.k, num=e.num, max_new_tokens=e.length, seed=seed)
        manifest.metrics["alpha_sweep"] = table


def run_full_pipeline(config: RunConfig, evaluate: bool | None = None,
                      stages: Sequence[str] | None = None) -> RunManifest:
    """Run the training stages in order into ``config.out_dir`` and persist ``manifest.json`` there.

    ``stages`` selects a subset of :data:`STAGES`; a skipped stage must
    already have its checkpoint in ``out_dir`` (later stages load it from
    disk and fail with :class:`MissingDependencyError` otherwise).
    """
    stages = list(STAGES if stages is None else stages)
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s) {sorted(unknown)}; choose from {list(STAGES)}")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config=config.to_dict())
    data = _stage("data", manifest, lambda: prepare_data(config))
    (out / "data").mkdir(exist_ok=True)
    for split in ("labeled", "unlabeled", "heldout"):
        save_corpus(out / "data" / f"{split}.jsonl", getattr(data, split))
    manifest.fingerprints = {
        "labeled": corpus_fingerprint(data.labeled),
        "unlabeled": corpus_fingerprint(data.unlabeled),
        "heldout": corpus_fingerprint(data.heldout),
        "classifier_split": corpus_fingerprint(data.labeled),
    }
    runners = {"base": run_stage_base, "classifier": run_stage_classifier, "adapters": run_stage_adapters}
    for name in STAGES:
        if name in stages:
            _stage(name, manifest, lambda: runners[name](data, config, out, manifest))
    if config.evaluation.enabled if evaluate is None else evaluate:
        _stage("evaluation", manifest, lambda: run_evaluation(data, config, out, manifest))
        if manifest.fingerprints["judge_split"] == manifest.fingerprints["classifier_split"]:
            raise PipelineError("evaluation", ValueError("judge and code classifier were trained on the same split"))
    manifest.save(out / "manifest.json")
    return manifest
