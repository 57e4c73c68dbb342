"""Transposed-channel attention, gated feed-forward, transformer block, cross-attention.

All blocks map ``[B, C, H, W] -> [B, C, H, W]``. Attention is computed across
channels (within each head), so attention maps are ``[B, heads, C/heads, C/heads]``
regardless of spatial size.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .nn import LayerNorm2d, Module, depthwise, pointwise
from .tensor import ShapeError, Tensor, split


def _check_heads(channels: int, heads: int) -> None:
    if heads < 1 or channels % heads:
        raise ShapeError(f"heads={heads} does not divide channel count {channels}")


def to_heads(x: Tensor, heads: int) -> Tensor:
    B, C, H, W = x.shape
    return x.reshape(B, heads, C // heads, H * W)


def from_heads(x: Tensor, H: int, W: int) -> Tensor:
    B, heads, ch, _ = x.shape
    return x.reshape(B, heads * ch, H, W)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.transpose(axes)


class MDTA(Module):
    """Multi-Dconv head transposed attention with per-head learnable temperature."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        _check_heads(dim, heads)
        self.dim = dim
        self.heads = heads
        self.temperature = Tensor(np.ones((heads, 1, 1)), requires_grad=True)
        self.qkv_pointwise = pointwise(dim, 3 * dim, rng)
        self.qkv_depthwise = depthwise(3 * dim, rng)
        self.out_pointwise = pointwise(dim, dim, rng)

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.dim:
            raise ShapeError(f"expected {self.dim} channels, got {x.shape[1]}")
        qkv = self.qkv_depthwise(self.qkv_pointwise(x))
        q, k, v = (to_heads(t, self.heads) for t in split(qkv, 3, axis=1))
        q = F.l2_normalize(q, axis=-1)
        k = F.l2_normalize(k, axis=-1)
        attn = F.softmax((q @ swap_last(k)) * self.temperature, axis=-1)
        return attn, v

    def forward(self, x: Tensor) -> Tensor:
        attn, v = self.attention(x)
        H, W = x.shape[-2:]
        return self.out_pointwise(from_heads(attn @ v, H, W))


class GDFN(Module):
    """Gated-Dconv feed-forward: project(gelu(branch1) * branch2)."""

    def __init__(self, dim: int, expansion: int, rng: np.random.Generator):
        hidden = expansion * dim
        self.dim = dim
        self.expand_pointwise = pointwise(dim, 2 * hidden, rng)
        self.expand_depthwise = depthwise(2 * hidden, rng)
        self.project_pointwise = pointwise(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.dim:
            raise ShapeError(f"expected {self.dim} channels, got {x.shape[1]}")
        h = self.expand_depthwise(self.expand_pointwise(x))
        gate, value = split(h, 2, axis=1)
        return self.project_pointwise(F.gelu(gate) * value)


class TransformerBlock(Module):
    """Pre-norm residual block: y = x + mdta(norm1(x)); out = y + gdfn(norm2(y))."""

    def __init__(self, dim: int, heads: int, expansion: int, rng: np.random.Generator):
        self.norm1 = LayerNorm2d(dim)
        self.mdta = MDTA(dim, heads, rng)
        self.norm2 = LayerNorm2d(dim)
        self.gdfn = GDFN(dim, expansion, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = x + self.mdta(self.norm1(x))
        return y + self.gdfn(self.norm2(y))


class TransformerStage(Module):
    def __init__(self, dim: int, heads: int, expansion: int, depth: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(dim, heads, expansion, rng) for _ in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class CrossAttention(Module):
    """Queries from ``a``, keys and values from ``b``; softmax(Q K^T) V, no scaling."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        _check_heads(dim, heads)
        self.dim = dim
        self.heads = heads
        self.q_pointwise = pointwise(dim, dim, rng)
        self.q_depthwise = depthwise(dim, rng)
        self.kv_pointwise = pointwise(dim, 2 * dim, rng)
        self.kv_depthwise = depthwise(2 * dim, rng)
        self.out_pointwise = pointwise(dim, dim, rng)

    def attention(self, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
        if a.shape != b.shape:
            raise ShapeError(f"cross-attention inputs differ: {a.shape} vs {b.shape}")
        if a.shape[1] != self.dim:
            raise ShapeError(f"expected {self.dim} channels, got {a.shape[1]}")
        q = to_heads(self.q_depthwise(self.q_pointwise(a)), self.heads)
        k, v = (to_heads(t, self.heads)
                for t in split(self.kv_depthwise(self.kv_pointwise(b)), 2, axis=1))
        return F.softmax(q @ swap_last(k), axis=-1), v

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        attn, v = self.attention(a, b)
        H, W = a.shape[-2:]
        return self.out_pointwise(from_heads(attn @ v, H, W))
