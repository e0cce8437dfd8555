"""Saving and loading trained components through the checkpoint format."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .adapters import AdapterBank
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .classifier import AttributeClassifier
from .fusion import AdapterFusion, FusionGate
from .transformer import ModelConfig, Transformer
from .vocab import Vocab


def _tensors_from(ckpt_tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in ckpt_tensors.items() if k.startswith(prefix)}


def _expect_kind(cfg: dict, kind: str, path) -> None:
    if cfg.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {cfg.get('kind')!r}")


def save_lm(path: str | Path, model: Transformer, vocab: Vocab, extra: dict | None = None) -> None:
    cfg = {"kind": "lm", "model": model.cfg.to_dict(), "vocab": vocab.to_dict(), **(extra or {})}
    save_checkpoint(path, {f"base/{k}": v.data for k, v in model.params.items()}, cfg)


def load_lm(path: str | Path) -> tuple[Transformer, Vocab, dict]:
    ckpt = load_checkpoint(path)
    _expect_kind(ckpt.config, "lm", path)
    mcfg = ModelConfig.from_dict(ckpt.config["model"])
    raw = _tensors_from(ckpt.tensors, "base/")
    params = {k: Tensor(v, name=k) for k, v in raw.items()}
    model = Transformer(mcfg, params=params)  # verifies the closed-form parameter count
    model.freeze()
    return model, Vocab.from_dict(ckpt.config["vocab"]), ckpt.config


def save_classifier(path: str | Path, clf: AttributeClassifier, extra: dict | None = None) -> None:
    if not clf.trained:
        raise CheckpointError("refusing to save an untrained classifier")
    cfg = {"kind": "classifier", "model": clf.cfg.to_dict(), "vocab": clf.vocab.to_dict(),
           "attributes": clf.attributes, **(extra or {})}
    save_checkpoint(path, {f"classifier/{k}": v.data for k, v in clf.parameters().items()}, cfg)


def load_classifier(path: str | Path) -> tuple[AttributeClassifier, dict]:
    ckpt = load_checkpoint(path)
    _expect_kind(ckpt.config, "classifier", path)
    mcfg = ModelConfig.from_dict(ckpt.config["model"])
    clf = AttributeClassifier(Vocab.from_dict(ckpt.config["vocab"]), ckpt.config["attributes"], mcfg)
    raw = _tensors_from(ckpt.tensors, "classifier/")
    for name, t in clf.parameters().items():
        if name not in raw:
            raise CheckpointError(f"{path}: missing tensor classifier/{name}")
        if raw[name].shape != t.shape:
            raise CheckpointError(f"{path}: classifier/{name} has shape {raw[name].shape}, expected {t.shape}")
        t.data = raw[name].copy()
    clf.set_requires_grad(False)
    clf.trained = True
    return clf, ckpt.config


def save_fusion(path: str | Path, fusion: AdapterFusion, base_cfg: ModelConfig, extra: dict | None = None) -> None:
    cfg = {"kind": "adapters", "model": base_cfg.to_dict(), "attributes": fusion.bank.attributes,
           "r_ffn": fusion.bank.r_ffn, "r_mha": fusion.bank.r_mha, **(extra or {})}
    save_checkpoint(path, {k: v.data for k, v in fusion.parameters().items()}, cfg)


def load_fusion(path: str | Path) -> tuple[AdapterFusion, dict]:
    ckpt = load_checkpoint(path)
    _expect_kind(ckpt.config, "adapters", path)
    mcfg = ModelConfig.from_dict(ckpt.config["model"])
    bank = AdapterBank(ckpt.config["attributes"], mcfg, r_ffn=ckpt.config["r_ffn"], r_mha=ckpt.config["r_mha"])
    bank.load_named(ckpt.tensors)
    gate = FusionGate(mcfg.n_layers)
    gate.load_named(ckpt.tensors)
    return AdapterFusion(bank, gate), ckpt.config
