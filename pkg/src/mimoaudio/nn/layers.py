"""Transformer building blocks assembled from :mod:`mimoaudio.nn.ops`."""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from . import ops


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return ops.rms_norm(x, self.weight, self.eps)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = False, std: float = 0.02):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_in, d_out) * std)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, causal: bool):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.qkv = Linear(dim, 3 * dim)
        self.out = Linear(dim, dim)

    def forward(self, x, positions, key_mask=None):
        *lead, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).split(d, dim=-1)

        def heads(z):
            return z.reshape(*lead, t, h, d // h).transpose(-2, -3)

        q, k, v = heads(q), heads(k), heads(v)
        q = ops.rope_rotate(q, positions)
        k = ops.rope_rotate(k, positions)
        mask = None if key_mask is None else key_mask.unsqueeze(-2)
        y = ops.attention(q, k, v, self.causal, mask)
        y = y.transpose(-2, -3).reshape(*lead, t, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, causal: bool, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = SelfAttention(dim, heads, causal)
        self.norm2 = RMSNorm(dim)
        self.up = Linear(dim, ffn_mult * dim)
        self.down = Linear(ffn_mult * dim, dim)

    def forward(self, x, positions, key_mask=None):
        x = x + self.attn(self.norm1(x), positions, key_mask)
        return x + self.down(ops.gelu(self.up(self.norm2(x))))


class Transformer(nn.Module):
    """Pre-norm stack with RoPE; ``causal`` selects the attention mask."""

    def __init__(self, dim: int, layers: int, heads: int, causal: bool):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, causal) for _ in range(layers))
        self.norm = RMSNorm(dim)

    def forward(self, x, positions: Optional[torch.Tensor] = None, key_mask=None):
        if positions is None:
            positions = torch.arange(x.shape[-2], dtype=x.dtype)
        for block in self.blocks:
            x = block(x, positions, key_mask)
        return self.norm(x)
