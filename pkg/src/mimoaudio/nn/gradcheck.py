"""Finite-difference verification of autograd gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import torch


@dataclass
class GradReport:
    max_rel_error: float
    per_tensor: dict
    coords_checked: int


def gradient_check(f: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
                   eps: float = 1e-6, max_coords: int = 200, seed: int = 0) -> GradReport:
    """Compare autograd gradients of ``f`` against central differences.

    ``f`` must be deterministic: it is re-evaluated twice per checked coordinate.
    Up to ``max_coords`` coordinates are sampled per tensor (all of them if fewer).
    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    for p in params.values():
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params.items()}
    gen = torch.Generator().manual_seed(seed)
    per_tensor = {}
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            coords = torch.arange(n) if n <= max_coords else torch.randperm(n, generator=gen)[:max_coords]
            a_flat = analytic[name].view(-1)
            err = 0.0
            for i in coords.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = a_flat[i].item()
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                err = max(err, rel)
            per_tensor[name] = err
            worst = max(worst, err)
            checked += len(coords)
    for p in params.values():
        p.grad = None
    return GradReport(worst, per_tensor, checked)
