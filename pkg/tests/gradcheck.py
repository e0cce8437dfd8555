"""Central finite differences against tape gradients (float64)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from lifi import autodiff as ad
from lifi.autodiff import Tensor

H = 1e-5


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = H, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Numeric gradient of scalar ``f()`` w.r.t. ``t``; returns (flat indices, values)."""
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = float(f().data)
        flat[i] = old - h
        down = float(f().data)
        flat[i] = old
        out[j] = (up - down) / (2 * h)
    return idx, out


def analytic_grads(f: Callable[[], Tensor], tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for t in tensors.values():
        t.grad = None
        t.requires_grad = True
    with ad.Tape() as tape:
        loss = f()
    tape.backward(loss)
    return {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check(f: Callable[[], Tensor], tensors: dict[str, Tensor], max_entries: int | None = 40) -> dict[str, float]:
    """Relative error per tensor (norm-based) between tape and finite-difference gradients."""
    grads = analytic_grads(f, tensors)
    errs = {}
    rng = np.random.default_rng(1)
    for name, t in tensors.items():
        idx, num = numeric_grad(f, t, max_entries=max_entries, rng=rng)
        errs[name] = rel_error(grads[name].reshape(-1)[idx], num)
    return errs
