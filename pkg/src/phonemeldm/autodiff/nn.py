"""Small module system and transformer building blocks on top of ``tensor``."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Parameters and submodules are discovered from instance attributes
    (including lists of modules), in attribute insertion order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (used for the 64-bit check mode)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} vs parameter {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Parameter(_init(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, n: int, d: int):
        self.table = Parameter(rng.normal(0.0, 1.0, size=(n, d)))

    def forward(self, ids) -> Tensor:
        return T.take(self.table, ids, axis=0)


class MLP(Module):
    """Two linear layers with a GELU between."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, D = x.shape
    x = x.reshape(*lead, L, heads, D // heads)
    return T.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -2, -3)
    *lead, L, H, dh = x.shape
    return x.reshape(*lead, L, H * dh)


class MultiHeadAttention(Module):
    """Multi-head attention; ``forward(query, memory)`` with memory=query for self-attention.

    ``value`` may differ from ``memory`` (keys and values from separate streams).
    """

    def __init__(self, rng, d_model: int, heads: int, d_mem: int | None = None, d_val: int | None = None):
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        d_mem = d_mem or d_model
        self.heads = heads
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_mem, d_model)
        self.v = Linear(rng, d_val or d_mem, d_model)
        self.o = Linear(rng, d_model, d_model)
        self.last_weights: np.ndarray | None = None

    def forward(self, query: Tensor, memory: Tensor, value: Tensor | None = None,
                keep_weights: bool = False) -> Tensor:
        value = memory if value is None else value
        q = split_heads(self.q(query), self.heads)
        k = split_heads(self.k(memory), self.heads)
        v = split_heads(self.v(value), self.heads)
        if k.ndim < q.ndim:
            raise T.ShapeError("memory must carry the same leading dims as the query")
        if keep_weights:
            self.last_weights = T.attention_weights(q, k)
        return self.o(merge_heads(T.attention(q, k, v)))


class FeedForward(Module):
    def __init__(self, rng, d: int, mult: int = 2):
        self.mlp = MLP(rng, d, d * mult, d)

    def forward(self, x):
        return self.mlp(x)


class TransformerLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, rng, d: int, heads: int):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, heads)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(rng, d)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.norm2(x))


class CrossAttentionLayer(Module):
    """Pre-norm cross-attention + feed-forward block. Output length follows the query."""

    def __init__(self, rng, d: int, heads: int, d_mem: int | None = None):
        self.norm_q = LayerNorm(d)
        self.norm_m = LayerNorm(d_mem or d)
        self.attn = MultiHeadAttention(rng, d, heads, d_mem=d_mem)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(rng, d)

    def forward(self, x: Tensor, memory: Tensor, keep_weights: bool = False) -> Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_m(memory), keep_weights=keep_weights)
        return x + self.ff(self.norm2(x))


class TransformerStack(Module):
    def __init__(self, rng, d: int, heads: int, layers: int):
        self.layers = [TransformerLayer(rng, d, heads) for _ in range(layers)]
        self.norm = LayerNorm(d)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


def sinusoidal(positions, d: int) -> np.ndarray:
    """Sinusoidal embedding of (possibly fractional) positions, shape (len(positions), d)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = pos * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if d % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(T.get_default_dtype())
