"""Attribute-specific parallel bottleneck adapters.

One adapter per (attribute, layer, site).  An adapter maps the sublayer input
``X`` to ``relu(X @ W_down) @ W_up``; the caller adds that to the sublayer
output.  Up-projections start at zero so a freshly built bank leaves the base
model's output untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transformer import SITES, ModelConfig

MHA_FACTOR = 4  # reduction factor at MHA sites is 4x the FFN one


@dataclass
class AdapterParams:
    w_down: Tensor
    w_up: Tensor
    activation: str = "relu"

    @property
    def d_model(self) -> int:
        return self.w_down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]


def bottleneck_dim(d_model: int, r: int) -> int:
    if r <= 0 or d_model % r:
        raise ValueError(f"reduction factor {r} must be a positive divisor of d_model={d_model}")
    return d_model // r


def adapter_forward(params: AdapterParams, x: Tensor) -> Tensor:
    if x.shape[-1] != params.d_model:
        raise ad.ShapeError(f"adapter expects width {params.d_model}, got input of shape {x.shape}")
    if params.activation != "relu":
        raise ValueError(f"unsupported adapter activation {params.activation!r}")
    return ad.matmul(ad.relu(ad.matmul(x, params.w_down)), params.w_up)


class AdapterBank:
    """All adapters for a set of attributes on a model of shape ``cfg``."""

    def __init__(self, attributes: Sequence[str], cfg: ModelConfig, r_ffn: int = 16,
                 r_mha: int | None = None, seed: int = 0, dtype=np.float32):
        if len(set(attributes)) != len(attributes):
            raise ValueError(f"duplicate attribute names in {list(attributes)}")
        r_mha = MHA_FACTOR * r_ffn if r_mha is None else r_mha
        if r_mha != MHA_FACTOR * r_ffn:
            raise ValueError(f"r_mha must equal {MHA_FACTOR} * r_ffn ({MHA_FACTOR * r_ffn}), got {r_mha}")
        self.attributes = list(attributes)
        self.n_layers = cfg.n_layers
        self.d_model = cfg.d_model
        self.r_ffn = r_ffn
        self.r_mha = r_mha
        self.dims = {"mha": bottleneck_dim(cfg.d_model, r_mha), "ffn": bottleneck_dim(cfg.d_model, r_ffn)}
        self.adapters: dict[tuple[int, int, str], AdapterParams] = {}
        for k in range(len(self.attributes)):
            for l in range(cfg.n_layers):
                for site in SITES:
                    db = self.dims[site]
                    self.adapters[(k, l, site)] = AdapterParams(
                        Tensor(np.zeros((cfg.d_model, db), dtype=dtype), requires_grad=True),
                        Tensor(np.zeros((db, cfg.d_model), dtype=dtype), requires_grad=True),
                    )
        self.init(seed)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def init(self, seed: int = 0, std: float = 0.02) -> "AdapterBank":
        """Small random down-projections, zero up-projections."""
        rng = np.random.default_rng(seed)
        for key in sorted(self.adapters):
            p = self.adapters[key]
            p.w_down.data = rng.normal(0.0, std, size=p.w_down.shape).astype(p.w_down.dtype)
            p.w_up.data = np.zeros(p.w_up.shape, dtype=p.w_up.dtype)
        return self

    def get(self, k: int, layer: int, site: str) -> AdapterParams:
        try:
            return self.adapters[(k, layer, site)]
        except KeyError:
            raise KeyError(f"no adapter for attribute {k}, layer {layer}, site {site!r}") from None

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (k, l, site), p in sorted(self.adapters.items()):
            out[f"adapter/{k}/{l}/{site}/w_down"] = p.w_down
            out[f"adapter/{k}/{l}/{site}/w_up"] = p.w_up
        return out

    def load_named(self, tensors: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors().items():
            if name not in tensors:
                raise KeyError(f"missing adapter tensor {name}")
            arr = np.asarray(tensors[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype).copy()

    def allocated(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def zero_attribute(self, k: int) -> None:
        for (kk, _, _), p in self.adapters.items():
            if kk == k:
                p.w_down.data[...] = 0
                p.w_up.data[...] = 0

    def astype(self, dtype) -> "AdapterBank":
        for p in self.adapters.values():
            p.w_down.data = p.w_down.data.astype(dtype)
            p.w_up.data = p.w_up.data.astype(dtype)
        return self


def init_adapters(bank: AdapterBank, seed: int = 0) -> AdapterBank:
    return bank.init(seed)


def count_extra_params(bank: AdapterBank, cfg: ModelConfig, with_gates: bool = True) -> int:
    """Closed-form count of parameters added on top of the base model."""
    if bank.n_layers != cfg.n_layers or bank.d_model != cfg.d_model:
        raise ValueError("adapter bank was built for a different model configuration")
    A = bank.n_attributes
    if A == 0:
        return 0
    d = cfg.d_model
    per = 2 * d * (d // bank.r_mha) + 2 * d * (d // bank.r_ffn)
    gates = 2 * cfg.n_layers if with_gates else 0
    return A * cfg.n_layers * per + gates
