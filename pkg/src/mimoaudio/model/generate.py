"""Autoregressive generation that keeps the per-layer delay pattern inside each patch."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..framing import EMPTY, DelayedPatch, InterleavedSequence, Patch, Text, delay_mask, delay_remove
from .config import EOS, PATCH
from .lm import Batch, MimoToyLM

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationSettings:
    temperature: float = 1.0
    top_k: int = 1
    max_elements: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def sample(logits: torch.Tensor, settings: GenerationSettings, gen: torch.Generator) -> int:
    logits = logits.detach().to(torch.float64)
    if settings.top_k == 1:
        return int(torch.argmax(logits))
    k = min(settings.top_k, logits.shape[-1])
    vals, idx = torch.topk(logits, k)
    z = vals / settings.temperature
    probs = torch.softmax(z - z.max(), dim=-1)
    return int(idx[torch.multinomial(probs, 1, generator=gen)])


@torch.no_grad()
def generate_patch(model: MimoToyLM, h: torch.Tensor, settings: GenerationSettings,
                   gen: torch.Generator) -> DelayedPatch:
    """Fill the delayed slots one at a time; slots the delay rule leaves undefined stay EMPTY."""
    cfg = model.cfg
    d = cfg.delay_config
    mask = delay_mask(cfg.g, d)
    length = d.delayed_length(cfg.g)
    slots = np.full((length, cfg.num_layers), EMPTY, dtype=np.int64)
    for j in range(length):
        inputs = torch.from_numpy(slots[:j])[None]
        logits = model.decoder_logits(h[None], inputs)
        for r in range(cfg.num_layers):
            if mask[j, r]:
                slots[j, r] = sample(logits[r][0, j], settings, gen)
    return DelayedPatch(slots, d, cfg.g)


@torch.no_grad()
def generate(model: MimoToyLM, prompt: InterleavedSequence,
             settings: GenerationSettings = GenerationSettings()) -> InterleavedSequence:
    """Continue ``prompt`` until ``<EOS>`` or ``settings.max_elements`` total elements."""
    model.eval()
    cfg = model.cfg
    gen = torch.Generator().manual_seed(settings.seed)
    elements = list(prompt.elements)
    if not elements:
        raise ValueError("prompt must contain at least one element")
    warned = False
    while len(elements) < settings.max_elements:
        window = elements
        if len(window) > cfg.context:
            if not warned:
                log.warning("context exceeded: keeping the last %d of %d elements", cfg.context, len(window))
                warned = True
            window = window[-cfg.context:]
        h = model.backbone_forward(Batch.from_sequences([InterleavedSequence(window)], cfg))[0, -1]
        tok = sample(model.text_head(h), settings, gen)
        if tok == PATCH:
            delayed = generate_patch(model, h, settings, gen)
            elements.append(delay_remove(delayed, cfg.delay_config, cfg.g))
            continue
        elements.append(Text(tok))
        if tok == EOS:
            break
    return InterleavedSequence(elements)


def prompt_of(seq: InterleavedSequence, n: Optional[int] = None) -> InterleavedSequence:
    """Leading text run of ``seq`` (or its first ``n`` elements)."""
    if n is None:
        n = 0
        while n < len(seq) and isinstance(seq[n], Text):
            n += 1
        n = max(n, 1)
    return InterleavedSequence(list(seq.elements[:n]))
