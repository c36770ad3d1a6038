"""Optimizer setup, learning-rate schedules and the training step."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import torch

from ..framing import InterleavedSequence
from .config import STAGE_LRS, StageWeights, TrainConfig
from .lm import Batch, MimoToyLM


class TrainingError(RuntimeError):
    pass


def lr_multiplier(step: int, total: int, schedule: str, warmup_ratio: float) -> float:
    warmup = max(1, int(round(warmup_ratio * total)))
    if step < warmup:
        return (step + 1) / warmup
    if schedule == "constant":
        return 1.0
    if schedule == "cosine":
        progress = (step - warmup) / max(1, total - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
    raise ValueError(f"unknown schedule {schedule!r}")


def make_optimizer(model: MimoToyLM, tc: TrainConfig) -> torch.optim.Adam:
    """Plain Adam with one parameter group per component; base rates keep the stage's ratios."""
    lrs = STAGE_LRS[tc.stage]
    groups = []
    for name, params in model.param_groups().items():
        lr = lrs[name] * tc.lr_scale
        groups.append({"params": params, "lr": lr, "base_lr": lr, "name": name})
    return torch.optim.Adam(groups, betas=tc.betas, eps=1e-8, weight_decay=0.0)


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    history: list = field(default_factory=list)


def train_step(model: MimoToyLM, batch: Batch, state: TrainState,
               weights: Optional[StageWeights] = None) -> dict:
    tc = state.config
    if weights is None:
        weights = StageWeights.preset(tc.stage, model.cfg.num_layers)
    mult = lr_multiplier(state.step, tc.steps, STAGE_LRS[tc.stage]["schedule"], tc.warmup_ratio)
    for g in state.optimizer.param_groups:
        g["lr"] = g["base_lr"] * mult
    state.optimizer.zero_grad(set_to_none=True)
    parts = model.sequence_loss(batch, weights)
    loss = parts.normalized
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at step {state.step}")
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    grad_norm = torch.nn.utils.clip_grad_norm_(params, tc.grad_clip) if params else torch.zeros(())
    if not torch.isfinite(grad_norm):
        raise TrainingError(f"non-finite gradient norm at step {state.step}")
    state.optimizer.step()
    counts = parts.audio_counts.clamp(min=1)
    metrics = {
        "step": state.step,
        "loss": loss.item(),
        "text_loss": parts.text.item() / max(parts.weight, 1e-12),
        "audio_weights": list(weights.rvq),
        "audio_loss": parts.audio_layers.sum().item() / max(parts.weight, 1e-12),
        "layer_nll": (parts.audio_nll / counts).tolist(),
        "grad_norm": float(grad_norm),
        "lr_scale": mult,
    }
    state.step += 1
    state.history.append(metrics)
    return metrics


def train(model: MimoToyLM, corpus: Sequence[InterleavedSequence], tc: TrainConfig,
          log: Optional[TextIO] = None,
          callback: Optional[Callable[[dict], None]] = None,
          stop_below: Optional[float] = None) -> TrainState:
    """Run up to ``tc.steps`` steps over ``corpus`` in fixed-seed shuffled minibatches.

    With ``stop_below`` set, training ends at the first step whose loss is below it.
    """
    state = TrainState(make_optimizer(model, tc), tc)
    gen = torch.Generator().manual_seed(tc.seed)
    n = len(corpus)
    bs = min(tc.batch_size, n)
    batches = None
    if bs == n:
        batches = [Batch.from_sequences(corpus, model.cfg)]
    order: list[int] = []
    model.train()
    for step in range(tc.steps):
        if batches is not None:
            batch = batches[0]
        else:
            if len(order) < bs:
                order += torch.randperm(n, generator=gen).tolist()
            idx, order = order[:bs], order[bs:]
            batch = Batch.from_sequences([corpus[i] for i in idx], model.cfg)
        metrics = train_step(model, batch, state)
        if callback is not None:
            callback(metrics)
        if log is not None and (step % tc.log_every == 0 or step == tc.steps - 1):
            log.write(json.dumps(metrics) + "\n")
            log.flush()
        if stop_below is not None and metrics["loss"] < stop_below:
            if log is not None:
                log.write(json.dumps(metrics) + "\n")
            break
    return state
