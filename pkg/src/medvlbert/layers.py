"""Attention and feed-forward blocks, plus a minimal parameter container."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that the optimizer updates."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Walks attributes to discover parameters under dotted names."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self.__dict__.items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ContractError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise DimensionError(f"{name}: expected {p.data.shape}, got {state[name].shape}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.data.dtype)

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(T.get_default_dtype())


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in)))
        self.bias = Parameter(np.zeros(d_out, dtype=T.get_default_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        dtype = T.get_default_dtype()
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.table = Parameter(_normal(rng, (n, d), std))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.table, ids)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Softmax(q kᵀ / √d_k) v over the last two axes.

    ``mask`` is boolean and broadcastable to (..., seq_q, seq_k); True marks
    an attendable key.  Returns the output, the weight tensor and the raw
    (pre-mask) logits.
    """
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    raw = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, raw.shape).any(axis=-1).all():
            raise ContractError("attention mask leaves a query row with no attendable position")
        logits = T.masked_fill(logits, ~mask, -np.inf)
    weights = T.softmax(logits, axis=-1)
    return weights @ v, weights, raw


def causal_mask(n: int) -> np.ndarray:
    """Position i may attend to positions ≤ i."""
    return np.tril(np.ones((n, n), dtype=bool))


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ContractError(f"model dim {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.record = False
        self.last_weights: np.ndarray | None = None
        self.last_logits: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.n_heads, self.head_dim).swapaxes(-2, -3)

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            # insert the head axis: (..., Tq, Tk) -> (..., 1, Tq, Tk)
            mask = np.expand_dims(mask, -3)
        out, weights, raw = scaled_dot_attention(q, k, v, mask)
        if self.record:
            self.last_weights = weights.data.copy()
            self.last_logits = raw.copy()
        *lead, _, n, _ = out.shape
        return self.o(out.swapaxes(-2, -3).reshape(*lead, n, self.n_heads * self.head_dim))


class FeedForward(Module):
    """``W_2 · max(0, W_1 x + b_1) + b_2`` applied per position."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.lin1 = Linear(d_model, d_ff, rng)
        self.lin2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return feed_forward(x, self)


def feed_forward(x: Tensor, p: FeedForward) -> Tensor:
    if x.shape[-1] != p.lin1.weight.shape[0]:
        raise DimensionError(f"feed_forward input width {x.shape[-1]} != {p.lin1.weight.shape[0]}")
    return p.lin2(T.relu(p.lin1(x)))


class _Sublayers(Module):
    dropout_p: float = 0.0
    dropout_rng: np.random.Generator | None = None

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.dropout_p, self.dropout_rng, self.training)


class EncoderLayer(_Sublayers):
    """Pre-norm self-attention + feed-forward, each wrapped in a residual."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self._drop(self.attn(h, h, mask))
        return x + self._drop(self.ffn(self.norm2(x)))


def encoder_layer_forward(x: Tensor, layer: EncoderLayer, mask: np.ndarray | None = None) -> Tensor:
    return layer(x, mask)


class DecoderBlock(_Sublayers):
    """Masked self-attention, cross-attention to terminology features, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm3 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)

    def __call__(self, h: Tensor, term_feats: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if term_feats.shape[-2] == 0:
            raise ContractError("decoder block needs at least one terminology feature")
        if mask is None:
            mask = causal_mask(h.shape[-2])
        x = self.norm1(h)
        h = h + self._drop(self.self_attn(x, x, mask))
        h = h + self._drop(self.cross_attn(self.norm2(h), term_feats))
        return h + self._drop(self.ffn(self.norm3(h)))


def decoder_block_forward(h: Tensor, term_feats: Tensor, block: DecoderBlock, mask: np.ndarray | None = None) -> Tensor:
    return block(h, term_feats, mask)
