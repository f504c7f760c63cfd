"""Minimal parameter containers on top of the tensor core."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import (
    Rng,
    Tensor,
    add,
    dropout,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scaled_dot_product_attention,
    swapaxes,
)


class Module:
    """Walks attributes in definition order to name parameters.

    Tensor attributes with ``requires_grad`` are trainable parameters; other
    Tensor attributes are frozen buffers.  Child modules and lists of modules
    contribute dotted prefixes.
    """

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_tensors(f"{full}.{i}.")

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors(prefix) if t.requires_grad}

    def named_buffers(self, prefix: str = "") -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors(prefix) if not t.requires_grad}

    def astype(self, dtype) -> None:
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)


def param(array: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


def buffer(array: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng):
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide token dim ({dim})")
        self.heads = heads
        # no qkv bias: a key bias shifts every logit of a row equally, so its
        # gradient is identically zero
        self.qkv = Linear(dim, 3 * dim, rng.split("qkv"), bias=False)
        self.out = Linear(dim, dim, rng.split("out"))

    def __call__(self, x: Tensor) -> Tensor:
        b, t, dim = x.shape
        dh = dim // self.heads
        qkv = reshape(self.qkv(x), (b, t, 3, self.heads, dh))
        qkv = qkv.reshape(b, t, 3 * self.heads, dh)
        heads = swapaxes(qkv, 1, 2)  # (b, 3h, t, dh)
        q = heads[:, : self.heads]
        k = heads[:, self.heads: 2 * self.heads]
        v = heads[:, 2 * self.heads:]
        ctx = scaled_dot_product_attention(q, k, v)  # (b, h, t, dh)
        merged = reshape(swapaxes(ctx, 1, 2), (b, t, dim))
        return self.out(merged)


class TransformerEncoderLayer(Module):
    """Pre-norm encoder block: self-attention and GELU MLP with residuals."""

    def __init__(self, dim: int, heads: int, rng: Rng, dropout_p: float = 0.1, mlp_ratio: int = 4):
        self.dropout_p = dropout_p
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng.split("attn"))
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng.split("fc1"))
        self.fc2 = Linear(mlp_ratio * dim, dim, rng.split("fc2"))

    def __call__(self, x: Tensor, rng: Rng | None, training: bool) -> Tensor:
        h = self.attn(self.norm1(x))
        x = add(x, dropout(h, self.dropout_p, rng, training))
        h = self.fc2(gelu(self.fc1(self.norm2(x))))
        return add(x, dropout(h, self.dropout_p, rng, training))
