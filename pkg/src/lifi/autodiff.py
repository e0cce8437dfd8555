"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the transformer, the adapters, the fusion gates
and the classifier are provided.  Every op records itself on the innermost
active :class:`Tape` when at least one input requires a gradient; outside a
tape, ops run forward only (used for generation and evaluation).

Broadcasting is deliberately narrow: the second operand of ``add``/``mul`` may
have a shape that is a *suffix* of the first operand's shape (a bias vector,
a positional table, or a scalar).  Everything else must match exactly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar for the common cases.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


class Tape:
    """Ordered record of executed operations.

    Use as a context manager around a forward pass, then call
    :meth:`backward` once on the scalar loss.  A tape may be replayed only
    once; call :meth:`reset` to reuse the object for a fresh graph.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def reset(self) -> None:
        self.ops.clear()
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self.consumed:
            raise RuntimeError("tape already replayed; call reset() before recording a new graph")
        out._tape = self
        self.ops.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("backward already called on this tape; reset it first")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss was not produced by operations recorded on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            _deposit(out, g)
            in_grads = backward_fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        # whatever is left belongs to leaves (tensors not produced on this tape)
        leaves = {}
        for _, inputs, _ in self.ops:
            for inp in inputs:
                leaves[id(inp)] = inp
        for key, g in grads.items():
            if key in leaves:
                _deposit(leaves[key], g)


def _deposit(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # backward rules never write into arrays in place, so sharing is safe
    g = np.asarray(g).astype(t.data.dtype, copy=False).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring tensor reachable from ``loss``."""
    if loss._tape is None:
        raise RuntimeError("loss was not produced by recorded operations (run the forward pass inside a Tape)")
    loss._tape.backward(loss)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: cannot broadcast {b.shape} onto {a.shape} (only trailing-suffix shapes are allowed)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    b = as_tensor(b, a.dtype)
    _check_suffix(a, b, "add")

    def bw(g):
        return (g if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")

    def bw(g):
        return (g if a.requires_grad else None,
                -_reduce_to(g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = as_tensor(b, a.dtype)
    _check_suffix(a, b, "mul")

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    return _make(y, (a,), lambda g: (g * (y > 0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu`` or ``tanh``."""
    binary = {"add": add, "mul": mul}
    unary = {"relu": relu, "tanh": tanh}
    if op in binary:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size
        return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,),
                     lambda g: (np.full(shape, g / n, dtype=a.data.dtype),))
    axis = axis % a.ndim
    n = shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _make(a.data.mean(axis=axis), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across any leading batch axes of ``a``) or has
    the same leading batch axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape} "
                         f"({a.shape[-1]} != {b.shape[-2]})")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ: {a.shape[:-2]} vs {b.shape[:-2]}")

    # a shared 2-D right operand becomes one large GEMM instead of a loop of small ones
    flat = b.ndim == 2 and a.ndim > 2

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data
    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)].ravel()[0]
        raise ValueError(f"token id {int(bad)} out of range for vocabulary of size {V}")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.ravel(), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------- normalisation / probabilities

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    y = _softmax_np(x.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def causal_mask(scores: Tensor) -> Tensor:
    """Set entries above the diagonal of the last two axes to -inf."""
    n, m = scores.shape[-2:]
    bias, keep = _causal_tables(n, m, scores.data.dtype)
    return _make(scores.data + bias, (scores,), lambda g: (g * keep,))


_CAUSAL_CACHE: dict = {}


def _causal_tables(n: int, m: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (n, m, np.dtype(dtype).str)
    if key not in _CAUSAL_CACHE:
        keep = np.tril(np.ones((n, m), dtype=bool))
        bias = np.where(keep, 0.0, -np.inf).astype(dtype)
        _CAUSAL_CACHE[key] = (bias, keep.astype(dtype))
    return _CAUSAL_CACHE[key]


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layernorm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = _reduce_to(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _reduce_to(g, bias.shape)
        return gx, gg, gb

    return _make(y.astype(x.data.dtype), (x, gain, bias), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, V] logits, got {logits.shape}")
    n, V = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but targets have shape {targets.shape}")
    if n == 0:
        raise ShapeError("cross_entropy over zero rows")
    if targets.min() < 0 or targets.max() >= V:
        bad = targets[(targets < 0) | (targets >= V)][0]
        raise ValueError(f"target id {int(bad)} out of range for {V} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def weighted_sum(weights: Tensor, parts: Sequence[Tensor]) -> Tensor:
    """``sum_k weights[:, k] * parts[k]``.

    ``weights`` is ``[B, K]``; each part is ``[B, ...]``.  This is the one place
    a per-row scalar multiplies a whole slab, so it gets its own op instead of
    widening the broadcasting rules.
    """
    parts = list(parts)
    if weights.ndim != 2 or weights.shape[1] != len(parts):
        raise ShapeError(f"weighted_sum: weights {weights.shape} do not match {len(parts)} parts")
    B = weights.shape[0]
    for p in parts:
        if p.shape != parts[0].shape or p.shape[0] != B:
            raise ShapeError(f"weighted_sum: part shape {p.shape} inconsistent with batch {B}")
    extra = (1,) * (parts[0].ndim - 1)
    w = weights.data
    out = np.zeros_like(parts[0].data)
    for k, p in enumerate(parts):
        out = out + w[:, k].reshape((B,) + extra) * p.data

    def bw(g):
        gw = None
        if weights.requires_grad:
            gw = np.stack([(g * p.data).reshape(B, -1).sum(axis=1) for p in parts], axis=1)
        gparts = [g * w[:, k].reshape((B,) + extra) if p.requires_grad else None
                  for k, p in enumerate(parts)]
        return (gw, *gparts)

    return _make(out, (weights, *parts), bw)
