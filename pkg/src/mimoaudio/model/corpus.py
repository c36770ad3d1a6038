"""Synthetic interleaved corpora for smoke and overfit runs."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..framing import InterleavedSequence, Patch, Text, interleave_schedule
from .config import AUDIO_BEGIN, AUDIO_END, EOS, ModelConfig


def with_control_tokens(seq: InterleavedSequence, eos: bool = True) -> InterleavedSequence:
    """Wrap every run of patches in ``<AUDIO_BEGIN>`` ... ``<AUDIO_END>`` and append ``<EOS>``."""
    out: list = []
    in_audio = False
    for e in seq:
        is_patch = isinstance(e, Patch)
        if is_patch and not in_audio:
            out.append(Text(AUDIO_BEGIN))
        elif not is_patch and in_audio:
            out.append(Text(AUDIO_END))
        in_audio = is_patch
        out.append(e)
    if in_audio:
        out.append(Text(AUDIO_END))
    if eos:
        out.append(Text(EOS))
    return InterleavedSequence(out)


def random_patch(cfg: ModelConfig, rng: np.random.Generator) -> Patch:
    cols = [rng.integers(k, size=cfg.g) for k in cfg.audio_vocab]
    return Patch(np.stack(cols, axis=1))


def synthetic_corpus(cfg: ModelConfig, n: int = 32, text_len: int = 10, n_patches: int = 10,
                     ratio: tuple[int, int] = (5, 5), seed: int = 0) -> list[InterleavedSequence]:
    """``n`` text-guided interleaved sequences with distinct leading text runs.

    Text is lowercase ASCII; audio tokens are uniform over each codebook.
    """
    rng = np.random.default_rng(seed)
    seqs, seen = [], set()
    while len(seqs) < n:
        text = rng.integers(ord("a"), ord("z") + 1, size=text_len).tolist()
        key = tuple(text[:ratio[0]])
        if key in seen:
            continue
        seen.add(key)
        patches = [random_patch(cfg, rng) for _ in range(n_patches)]
        seqs.append(with_control_tokens(interleave_schedule(text, patches, ratio)))
    return seqs


def audio_tokens(seq: InterleavedSequence) -> np.ndarray:
    ps = seq.patches
    if not ps:
        return np.zeros((0,), dtype=np.int64)
    return np.concatenate([p.frames.reshape(-1) for p in ps])


def audio_token_accuracy(reference: Sequence[InterleavedSequence],
                         generated: Sequence[InterleavedSequence]) -> float:
    """Fraction of reference audio tokens reproduced at the same patch/frame/layer slot."""
    hits = total = 0
    for ref, gen in zip(reference, generated):
        a, b = audio_tokens(ref), audio_tokens(gen)
        k = min(a.shape[0], b.shape[0])
        hits += int((a[:k] == b[:k]).sum())
        total += a.shape[0]
    return hits / max(total, 1)
