"""Core differentiable ops on torch tensors.

Backward passes come from torch autograd; every op checks its input shapes and
raises :class:`ShapeError` naming itself on mismatch.
"""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F

ROPE_BASE = 10000.0


class ShapeError(ValueError):
    pass


def _fail(op: str, msg: str):
    raise ShapeError(f"{op}: {msg}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        _fail("matmul", f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _fail("add", f"shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")
    return a + b


def scale(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if weight.shape != x.shape[-1:]:
        _fail("rms_norm", f"weight {tuple(weight.shape)} does not match features {x.shape[-1]}")
    inv = torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps)
    return x * inv * weight


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Rows of ``table`` for ``ids``; negative ids (EMPTY) map to the zero vector."""
    if table.dim() != 2:
        _fail("embedding_lookup", f"table must be 2-D, got {tuple(table.shape)}")
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < -1):
        raise IndexError("embedding_lookup: index out of range")
    present = (ids >= 0).unsqueeze(-1).to(table.dtype)
    return F.embedding(ids.clamp(min=0), table) * present


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotary embedding on the last dim of ``x`` (``(..., T, D)``), pairing ``i`` with ``i + D/2``."""
    d = x.shape[-1]
    if d % 2:
        _fail("rope_rotate", f"feature dim must be even, got {d}")
    positions = torch.as_tensor(positions, dtype=x.dtype)
    if positions.shape[-1] != x.shape[-2]:
        _fail("rope_rotate", f"{positions.shape[-1]} positions for {x.shape[-2]} steps")
    half = d // 2
    freqs = base ** (-torch.arange(half, dtype=x.dtype) * 2.0 / d)
    angles = positions[..., :, None] * freqs
    cos, sin = torch.cos(angles), torch.sin(angles)
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, causal: bool,
              key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Scaled dot-product attention over ``(..., T, dh)`` inputs.

    ``key_mask`` (``(..., T)`` bool, True = attend) hides padding keys.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        _fail("attention", f"q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    t_q, t_k = q.shape[-2], k.shape[-2]
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    allowed = torch.ones(t_q, t_k, dtype=torch.bool)
    if causal:
        allowed = torch.tril(allowed, diagonal=t_k - t_q)
    if key_mask is not None:
        allowed = allowed & key_mask[..., None, :].to(torch.bool)
    scores = scores.masked_fill(~allowed, float("-inf"))
    # rows with no visible key (fully padded) would be NaN
    scores = torch.where(allowed.any(-1, keepdim=True), scores, torch.zeros_like(scores))
    return matmul(softmax(scores, dim=-1), v)


def causal_attention(q, k, v, key_mask=None):
    return attention(q, k, v, causal=True, key_mask=key_mask)


def bidirectional_attention(q, k, v, key_mask=None):
    return attention(q, k, v, causal=False, key_mask=key_mask)


def cross_entropy_weighted(logits: torch.Tensor, targets: torch.Tensor,
                           weights: torch.Tensor) -> torch.Tensor:
    """``sum_n weights[n] * -log softmax(logits[n])[targets[n]]``.

    Targets at zero-weight positions may be arbitrary (e.g. EMPTY); they are clamped
    into range and contribute nothing.
    """
    if logits.dim() != 2 or targets.shape != logits.shape[:1] or weights.shape != targets.shape:
        _fail("cross_entropy_weighted",
              f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, weights {tuple(weights.shape)}")
    targets = torch.as_tensor(targets, dtype=torch.long)
    weights = torch.as_tensor(weights, dtype=logits.dtype)
    active = weights != 0
    if bool(((targets < 0) | (targets >= logits.shape[1]))[active].any()):
        raise IndexError("cross_entropy_weighted: target out of range")
    safe = torch.where(active, targets, torch.zeros_like(targets)).clamp(0, logits.shape[1] - 1)
    logp = torch.log_softmax(logits, dim=-1).gather(1, safe[:, None])[:, 0]
    return -(weights * logp).sum()
