"""Temperature-gated fusion of attribute adapters.

At every insertion site the adapters of all attributes run on the same input
and are mixed with weights ``softmax(c / T)``, where ``c`` is the control code
and ``T = exp(tau)`` is a learnable per-site temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import AdapterBank, adapter_forward
from .autodiff import Tensor
from .transformer import SITES


@dataclass(frozen=True)
class ControlCode:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"control code must be a vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"control code has non-finite entries: {v}")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def tolist(self) -> list[float]:
        return self.values.tolist()


def make_test_code(target: int, alpha: float, n_attributes: int) -> ControlCode:
    """``alpha`` at ``target``, zero elsewhere."""
    if not 0 <= target < n_attributes:
        raise ValueError(f"target {target} outside 0..{n_attributes - 1}")
    if not alpha > 0:
        raise ValueError(f"control strength must be positive, got {alpha}")
    c = np.zeros(n_attributes)
    c[target] = alpha
    return ControlCode(c)


def _code_array(code, n_attributes: int | None = None) -> np.ndarray:
    c = np.asarray(code.values if isinstance(code, ControlCode) else code, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("control code has non-finite entries")
    if n_attributes is not None and c.shape[-1] != n_attributes:
        raise ValueError(f"control code has length {c.shape[-1]}, expected {n_attributes}")
    return c


def fusion_weights(code, tau) -> Tensor:
    """Softmax of ``code / exp(tau)`` along the last axis.

    ``code`` may be a vector or a ``[B, K]`` batch (array, ControlCode or
    Tensor); ``tau`` is the log-temperature, a scalar Tensor or float.
    Gradients flow to both when they are Tensors that require them.
    """
    tau = tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=np.float64))
    if tau.size != 1:
        raise ad.ShapeError("temperature must be a scalar")
    if isinstance(code, Tensor):
        c = code
        if not np.all(np.isfinite(c.data)):
            raise ValueError("control code has non-finite entries")
    else:
        c = Tensor(_code_array(code).astype(tau.dtype))
    inv_t = ad.exp(ad.scale(ad.reshape(tau, ()), -1.0))
    return ad.softmax(ad.mul(c, inv_t), axis=-1)


def weights_at_temperature(code, T: float) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return fusion_weights(code, np.log(T)).data


class FusionGate:
    """One log-temperature per insertion site (``2 * n_layers`` in total)."""

    def __init__(self, n_layers: int, dtype=np.float32, init_temperature: float = 1.0):
        self.n_layers = n_layers
        self.taus: dict[tuple[int, str], Tensor] = {
            (l, s): Tensor(np.asarray(np.log(init_temperature), dtype=dtype), requires_grad=True)
            for l in range(n_layers) for s in SITES
        }

    def temperature(self, layer: int, site: str) -> float:
        return float(np.exp(self.taus[(layer, site)].data))

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"fusion/{l}/{s}/tau": t for (l, s), t in sorted(self.taus.items())}

    def load_named(self, tensors: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors().items():
            if name not in tensors:
                raise KeyError(f"missing fusion tensor {name}")
            t.data = np.asarray(tensors[name], dtype=t.dtype).reshape(()).copy()

    def astype(self, dtype) -> "FusionGate":
        for t in self.taus.values():
            t.data = t.data.astype(dtype)
        return self


class AdapterFusion:
    """Adapter bank plus fusion gate: the complete controllable add-on."""

    def __init__(self, bank: AdapterBank, gate: FusionGate):
        if gate.n_layers != bank.n_layers:
            raise ValueError("fusion gate and adapter bank disagree on layer count")
        self.bank = bank
        self.gate = gate

    @property
    def n_attributes(self) -> int:
        return self.bank.n_attributes

    def parameters(self) -> dict[str, Tensor]:
        return {**self.bank.named_tensors(), **self.gate.named_tensors()}

    def site_weights(self, code, batch: int = 1) -> dict[tuple[int, str], Tensor]:
        """Fusion weights ``[B, K]`` for every site, computed once per forward pass."""
        if isinstance(code, Tensor):
            c = code
        else:
            c = _code_array(code, self.n_attributes)
            if c.ndim == 1:
                c = np.broadcast_to(c, (batch, c.shape[0]))
            if c.shape[0] != batch:
                raise ValueError(f"{c.shape[0]} control codes for a batch of {batch}")
        return {key: fusion_weights(c, tau) for key, tau in self.gate.taus.items()}

    def fused_output(self, x: Tensor, layer: int, site: str, weights: Tensor) -> Tensor:
        parts = [adapter_forward(self.bank.get(k, layer, site), x) for k in range(self.n_attributes)]
        if weights.dtype != x.dtype:
            weights = _cast(weights, x.dtype)
        if x.ndim == 2:
            # single sequence: treat as a batch of one
            x3 = [ad.reshape(p, (1,) + p.shape) for p in parts]
            out = ad.weighted_sum(ad.reshape(weights, (1, -1)) if weights.ndim == 1 else weights, x3)
            return ad.reshape(out, x.shape)
        return ad.weighted_sum(weights, parts)


def _cast(t: Tensor, dtype) -> Tensor:
    """Dtype conversion that keeps the gradient path."""
    src = t.dtype
    return ad._make(t.data.astype(dtype), (t,), lambda g: (g.astype(src),))


def fused_adapter_output(fusion: AdapterFusion, x: Tensor, layer: int, site: str, code) -> Tensor:
    """``sum_k w_k * ADP_k(x)`` at one site for a single control code."""
    if not 0 <= layer < fusion.bank.n_layers or site not in SITES:
        raise KeyError(f"no insertion site ({layer}, {site!r})")
    batch = x.shape[0] if x.ndim == 3 else 1
    w = fusion.site_weights(code, batch=batch)[(layer, site)]
    return fusion.fused_output(x, layer, site, w)
