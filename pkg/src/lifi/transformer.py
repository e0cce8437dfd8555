"""Pre-norm Transformer blocks and the autoregressive language model.

Each block exposes its two sublayers (multi-head attention and the
feed-forward network) separately so that adapters can be attached in
parallel: the adapter reads the sublayer input and its output is added to the
sublayer output before the residual connection.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SITES = ("mha", "ffn")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 32
    n_ctx: int = 128
    d_ff: int = field(default=0)

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "n_ctx", "d_ff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        if self.n_ctx < 2:
            raise ValueError("n_ctx must be at least 2")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count (output head tied to the token embedding)."""
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 2 * (2 * d) + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    return cfg.vocab_size * d + cfg.n_ctx * d + cfg.n_layers * per_layer + 2 * d


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f, L = cfg.d_model, cfg.d_ff, cfg.n_layers
    std = 0.02
    resid_std = std / np.sqrt(2 * L)

    def normal(shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape).astype(dtype))

    def const(shape, v):
        return Tensor(np.full(shape, v, dtype=dtype))

    p: dict[str, Tensor] = {
        "tok_emb": normal((cfg.vocab_size, d)),
        "pos_emb": normal((cfg.n_ctx, d), 0.01),
    }
    for l in range(L):
        pre = f"layers/{l}/"
        p[pre + "ln1/g"] = const((d,), 1.0)
        p[pre + "ln1/b"] = const((d,), 0.0)
        for w in ("q", "k", "v"):
            p[pre + f"attn/w{w}"] = normal((d, d))
            p[pre + f"attn/b{w}"] = const((d,), 0.0)
        p[pre + "attn/wo"] = normal((d, d), resid_std)
        p[pre + "attn/bo"] = const((d,), 0.0)
        p[pre + "ln2/g"] = const((d,), 1.0)
        p[pre + "ln2/b"] = const((d,), 0.0)
        p[pre + "ffn/w1"] = normal((d, f))
        p[pre + "ffn/b1"] = const((f,), 0.0)
        p[pre + "ffn/w2"] = normal((f, d), resid_std)
        p[pre + "ffn/b2"] = const((d,), 0.0)
    p["ln_f/g"] = const((d,), 1.0)
    p["ln_f/b"] = const((d,), 0.0)
    for name, t in p.items():
        t.name = name
    return p


def params_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


class Transformer:
    """Token + position embeddings followed by ``n_layers`` pre-norm blocks.

    ``causal=True`` gives the language model; the classifier uses the same
    blocks bidirectionally.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32, causal: bool = True,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.causal = causal
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        n = sum(t.size for t in self.params.values())
        if n != param_count(cfg):
            raise ValueError(f"parameter count {n} does not match closed form {param_count(cfg)}")
        self.frozen = False

    # ------------------------------------------------------------ bookkeeping

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def checksum(self) -> str:
        return params_checksum(self.params)

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def freeze(self) -> None:
        self.set_requires_grad(False)
        self.frozen = True

    def unfreeze(self) -> None:
        self.set_requires_grad(True)
        self.frozen = False

    def astype(self, dtype) -> "Transformer":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                  for k, v in self.params.items()}
        return type(self)(self.cfg, causal=self.causal, params=params)

    # ------------------------------------------------------------ sublayers

    def _p(self, layer: int, name: str) -> Tensor:
        return self.params[f"layers/{layer}/{name}"]

    def mha_forward(self, x: Tensor, layer: int, causal: bool | None = None) -> Tensor:
        """Multi-head self-attention over ``x`` of shape ``[B, n, d]`` (or ``[n, d]``)."""
        causal = self.causal if causal is None else causal
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        B, n, d = x.shape
        if n > self.cfg.n_ctx:
            raise ValueError(f"sequence length {n} exceeds n_ctx={self.cfg.n_ctx}")
        H, dh = self.cfg.n_heads, self.cfg.head_dim

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

        q = heads(ad.linear(x, self._p(layer, "attn/wq"), self._p(layer, "attn/bq")))
        k = heads(ad.linear(x, self._p(layer, "attn/wk"), self._p(layer, "attn/bk")))
        v = heads(ad.linear(x, self._p(layer, "attn/wv"), self._p(layer, "attn/bv")))
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dh))
        if causal:
            scores = ad.causal_mask(scores)
        att = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, n, d))
        out = ad.linear(ctx, self._p(layer, "attn/wo"), self._p(layer, "attn/bo"))
        return ad.reshape(out, (n, d)) if squeeze else out

    def ffn_forward(self, x: Tensor, layer: int) -> Tensor:
        h = ad.relu(ad.linear(x, self._p(layer, "ffn/w1"), self._p(layer, "ffn/b1")))
        return ad.linear(h, self._p(layer, "ffn/w2"), self._p(layer, "ffn/b2"))

    # ------------------------------------------------------------ full stack

    def embed(self, ids: np.ndarray) -> Tensor:
        n = ids.shape[-1]
        if n > self.cfg.n_ctx:
            raise ValueError(f"sequence length {n} exceeds n_ctx={self.cfg.n_ctx}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id {int(ids.max())} out of range for vocabulary of size {self.cfg.vocab_size}")
        pos = ad.embedding(self.params["pos_emb"], np.arange(n))
        return ad.add(ad.embedding(self.params["tok_emb"], ids), pos)

    def hidden(self, ids, code=None, fusion=None) -> Tensor:
        """Final-layer-normed hidden states ``[B, n, d]`` for ``ids`` of shape ``[B, n]``.

        When ``fusion`` and ``code`` are given, every sublayer output is
        augmented by the fused adapter output computed from the sublayer input.
        """
        ids = _as_batch(ids)
        if ids.shape[1] == 0:
            raise ValueError("empty token sequence")
        x = self.embed(ids)
        weights = None
        if fusion is not None and code is not None:
            weights = fusion.site_weights(code, batch=ids.shape[0])
        for l in range(self.cfg.n_layers):
            h = ad.layernorm(x, self._p(l, "ln1/g"), self._p(l, "ln1/b"))
            y = self.mha_forward(h, l)
            if weights is not None:
                y = ad.add(y, fusion.fused_output(h, l, "mha", weights[(l, "mha")]))
            x = ad.add(x, y)
            h = ad.layernorm(x, self._p(l, "ln2/g"), self._p(l, "ln2/b"))
            y = self.ffn_forward(h, l)
            if weights is not None:
                y = ad.add(y, fusion.fused_output(h, l, "ffn", weights[(l, "ffn")]))
            x = ad.add(x, y)
        return ad.layernorm(x, self.params["ln_f/g"], self.params["ln_f/b"])

    def logits(self, ids, code=None, fusion=None) -> Tensor:
        """Next-token logits; row ``i`` is the distribution of token ``i + 1``."""
        squeeze = np.asarray(ids).ndim == 1
        h = self.hidden(ids, code=code, fusion=fusion)
        out = ad.matmul(h, ad.swap_last(self.params["tok_emb"]))
        return ad.reshape(out, out.shape[1:]) if squeeze else out

    def loss(self, ids, code=None, fusion=None) -> Tensor:
        """Mean next-token NLL over positions ``1..n-1``."""
        ids = _as_batch(ids)
        B, n = ids.shape
        if n < 2:
            raise ValueError("lm_loss needs sequences of length >= 2")
        logits = self.logits(ids[:, :-1], code=code, fusion=fusion)
        flat = ad.reshape(logits, (B * (n - 1), self.cfg.vocab_size))
        return ad.cross_entropy(flat, ids[:, 1:].reshape(-1))


# TransformerLM is the causal model; the alias keeps call sites readable.
TransformerLM = Transformer


def _as_batch(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    return ids


def lm_forward(model: Transformer, tokens, code=None, fusion=None) -> Tensor:
    return model.logits(tokens, code=code, fusion=fusion)


def lm_loss(model: Transformer, tokens, code=None, fusion=None) -> Tensor:
    return model.loss(tokens, code=code, fusion=fusion)


def sequence_nll(model: Transformer, ids: np.ndarray, code=None, fusion=None) -> float:
    """Forward-only mean token NLL of a single sequence."""
    return float(model.loss(ids, code=code, fusion=fusion).data)
