"""Small transformer building blocks on top of :mod:`etadrive.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Parameter container; parameters are discovered by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        return dict(self.named_parameters(prefix))

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        own = self.params(prefix)
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in own.items():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=np.float64)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        self.w = _param(np.zeros((d_in, d_out)) if zero else trunc_normal(rng, (d_in, d_out)))
        self.b = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.g = _param(np.ones(dim))
        self.b = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.g + self.b


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self._heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self._heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        out = T.attention(qkv[0], qkv[1], qkv[2])
        return self.proj(_merge_heads(out))


class CrossAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self._heads = heads
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        b, m, d = memory.shape
        h = self._heads
        q = _split_heads(self.q(x), h)
        kv = self.kv(memory).reshape(b, m, 2, h, d // h).transpose(2, 0, 3, 1, 4)
        return self.proj(_merge_heads(T.attention(q, kv[0], kv[1])))


class Block(Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class DecoderBlock(Module):
    """Pre-norm block: query self-attention, cross-attention to memory, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ln_mem = LayerNorm(dim)
        self.cross = CrossAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = x + self.self_attn(self.ln1(x))
        x = x + self.cross(self.ln2(x), self.ln_mem(memory))
        return x + self.mlp(self.ln3(x))
