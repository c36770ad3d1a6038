"""Patch encoder -> causal backbone -> delayed patch decoder over interleaved sequences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from ..framing import EMPTY, InterleavedSequence, Patch, Text
from ..nn import ops
from ..nn.layers import Linear, Transformer
from .config import PATCH, ModelConfig, StageWeights

PAD, TEXT, AUDIO = 0, 1, 2


class ContextExceeded(ValueError):
    pass


@dataclass
class Batch:
    """Right-padded tensor view of a list of interleaved sequences."""

    kind: torch.Tensor         # B x L  (PAD / TEXT / AUDIO)
    text_ids: torch.Tensor     # B x L
    frames: torch.Tensor       # B x L x G x R', EMPTY outside patches

    @property
    def shape(self):
        return self.kind.shape

    @classmethod
    def from_sequences(cls, seqs: Sequence[InterleavedSequence], cfg: ModelConfig) -> "Batch":
        b = len(seqs)
        length = max((len(s) for s in seqs), default=0)
        kind = np.zeros((b, length), dtype=np.int64)
        text = np.zeros((b, length), dtype=np.int64)
        frames = np.full((b, length, cfg.g, cfg.num_layers), EMPTY, dtype=np.int64)
        for i, seq in enumerate(seqs):
            for j, e in enumerate(seq):
                if isinstance(e, Text):
                    kind[i, j] = TEXT
                    text[i, j] = e.id
                else:
                    if e.frames.shape != (cfg.g, cfg.num_layers):
                        raise ValueError(f"patch shape {e.frames.shape} != ({cfg.g}, {cfg.num_layers})")
                    kind[i, j] = AUDIO
                    frames[i, j] = e.frames
        return cls(torch.from_numpy(kind), torch.from_numpy(text), torch.from_numpy(frames))


def delay_tensor(frames: torch.Tensor, delays: Sequence[int]) -> torch.Tensor:
    """Vectorized delay transform of ``N x G x R'`` patches to ``N x (G+max D) x R'``."""
    n, g, r = frames.shape
    length = g + max(delays)
    d = torch.as_tensor(delays)
    src = torch.arange(length)[:, None] - d[None, :]
    valid = (src >= 0) & (src < g)
    gathered = frames.gather(1, src.clamp(0, g - 1)[None].expand(n, -1, -1))
    return torch.where(valid[None], gathered, torch.full_like(gathered, EMPTY))


@dataclass
class LossParts:
    total: torch.Tensor          # weighted sum of NLLs
    text: torch.Tensor           # weighted text-head part (text tokens and <PATCH> markers)
    audio_layers: torch.Tensor   # R' weighted audio NLL sums
    audio_nll: torch.Tensor      # R' unweighted NLL sums over non-EMPTY slots
    audio_counts: torch.Tensor   # R' non-EMPTY slot counts
    weight: float                # sum of all weights

    @property
    def normalized(self) -> torch.Tensor:
        return self.total / max(self.weight, 1e-12)


class MimoToyLM(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        d_enc, d_bb = cfg.enc_dim, cfg.backbone_dim
        # one set of tables, read by both the patch encoder and the patch decoder
        self.audio_embed = nn.ParameterList(
            nn.Parameter(torch.randn(k, d_enc) * 0.02) for k in cfg.audio_vocab)
        self.encoder = Transformer(d_enc, cfg.enc_layers, cfg.enc_heads, causal=False)
        self.enc_proj = Linear(cfg.g * d_enc, d_bb, bias=True)
        self.text_embed = nn.Parameter(torch.randn(cfg.text_vocab, d_bb) * 0.02)
        self.backbone = Transformer(d_bb, cfg.backbone_layers, cfg.backbone_heads, causal=True)
        self.text_head = Linear(d_bb, cfg.text_vocab)
        self.dec_in = Linear(d_bb, cfg.dec_dim, bias=True)
        self.decoder = Transformer(cfg.dec_dim, cfg.dec_layers, cfg.dec_heads, causal=True)
        self.heads = nn.ModuleList(Linear(cfg.dec_dim, k) for k in cfg.audio_vocab)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        enc = list(self.audio_embed.parameters()) + list(self.encoder.parameters()) \
            + list(self.enc_proj.parameters())
        bb = [self.text_embed] + list(self.backbone.parameters()) + list(self.text_head.parameters())
        dec = list(self.dec_in.parameters()) + list(self.decoder.parameters()) \
            + list(self.heads.parameters())
        return {"encoder": enc, "backbone": bb, "decoder": dec}

    @property
    def dtype(self):
        return self.text_embed.dtype

    # ----------------------------------------------------------------- components

    def embed_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Sum of per-layer embeddings for ``(..., R')`` index tensors; EMPTY adds zero."""
        frames = torch.as_tensor(frames, dtype=torch.long)
        if frames.shape[-1] != self.cfg.num_layers:
            raise ValueError(f"frame has {frames.shape[-1]} layers, model expects {self.cfg.num_layers}")
        out = 0
        for r, table in enumerate(self.audio_embed):
            out = out + ops.embedding_lookup(table, frames[..., r])
        return out

    def encode_patches(self, frames: torch.Tensor) -> torch.Tensor:
        """``N x G x R'`` patches to ``N x backbone_dim`` vectors."""
        n = frames.shape[0]
        x = self.embed_frames(frames)
        present = (frames != EMPTY).any(-1)
        pos = torch.arange(self.cfg.g, dtype=x.dtype)
        y = self.encoder(x, pos, key_mask=present)
        return self.enc_proj(y.reshape(n, self.cfg.g * self.cfg.enc_dim))

    def encode_patch(self, p: Patch) -> torch.Tensor:
        return self.encode_patches(torch.from_numpy(p.frames)[None])[0]

    def backbone_forward(self, batch: Batch) -> torch.Tensor:
        b, length = batch.shape
        if length > self.cfg.context:
            raise ContextExceeded(f"context exceeded: {length} > {self.cfg.context}")
        x = torch.zeros(b, length, self.cfg.backbone_dim, dtype=self.dtype)
        text_mask = batch.kind == TEXT
        audio_mask = batch.kind == AUDIO
        if text_mask.any():
            x[text_mask] = ops.embedding_lookup(self.text_embed, batch.text_ids[text_mask])
        if audio_mask.any():
            x[audio_mask] = self.encode_patches(batch.frames[audio_mask])
        pos = torch.arange(length, dtype=self.dtype)
        return self.backbone(x, pos)

    def decoder_logits(self, h: torch.Tensor, delayed_inputs: torch.Tensor) -> list[torch.Tensor]:
        """Decoder over ``[proj(h), frames...]``; returns per-layer logits ``N x T x K_r``."""
        prefix = self.dec_in(h)[:, None, :]
        slots = torch.cat([prefix, self.embed_frames(delayed_inputs)], dim=1)
        pos = torch.arange(slots.shape[1], dtype=slots.dtype)
        y = self.decoder(slots, pos)
        return [head(y) for head in self.heads]

    # --------------------------------------------------------------------- losses

    def decode_patch_nll(self, h: torch.Tensor, targets: torch.Tensor,
                         rvq_weights: Sequence[float]):
        """Weighted NLL of ``N x G x R'`` target patches given backbone states ``N x D``.

        Returns ``(weighted per-layer sums, unweighted per-layer sums, per-layer counts)``.
        """
        w = torch.as_tensor(rvq_weights, dtype=self.dtype)
        if w.shape[0] != self.cfg.num_layers:
            raise ValueError(f"{w.shape[0]} RVQ weights for {self.cfg.num_layers} layers")
        delayed = delay_tensor(targets, self.cfg.delays)
        logits = self.decoder_logits(h, delayed[:, :-1])
        weighted, raw, counts = [], [], []
        for r, lg in enumerate(logits):
            tgt = delayed[:, :, r].reshape(-1)
            present = (tgt != EMPTY).to(self.dtype)
            flat = lg.reshape(-1, lg.shape[-1])
            nll = ops.cross_entropy_weighted(flat, tgt, present)
            raw.append(nll)
            weighted.append(nll * w[r])
            counts.append(present.sum())
        return torch.stack(weighted), torch.stack(raw), torch.stack(counts)

    def sequence_loss(self, batch: Batch, weights: StageWeights) -> LossParts:
        h = self.backbone_forward(batch)
        nxt = batch.kind[:, 1:]
        h_prev = h[:, :-1]
        r = self.cfg.num_layers
        # text head: next text id, or <PATCH> ahead of a patch
        tgt = torch.where(nxt == AUDIO, torch.full_like(nxt, PATCH), batch.text_ids[:, 1:])
        tw = torch.zeros(nxt.shape, dtype=self.dtype)
        tw[nxt == TEXT] = weights.text
        tw[nxt == AUDIO] = weights.modality
        if nxt.numel():
            logits = self.text_head(h_prev.reshape(-1, h.shape[-1]))
            text = ops.cross_entropy_weighted(logits, tgt.reshape(-1), tw.reshape(-1))
        else:
            text = h.sum() * 0
        audio_mask = nxt == AUDIO
        if audio_mask.any():
            targets = batch.frames[:, 1:][audio_mask]
            layers, raw, counts = self.decode_patch_nll(h_prev[audio_mask], targets, weights.rvq)
        else:
            layers = raw = h.new_zeros(r) + h.sum() * 0
            counts = torch.zeros(r, dtype=self.dtype)
        rvq_w = torch.as_tensor(weights.rvq, dtype=self.dtype)
        weight = float(tw.sum() + (counts * rvq_w).sum())
        return LossParts(text + layers.sum(), text, layers, raw.detach(), counts, weight)

    def element_nll(self, seq: InterleavedSequence, i: int, weights: StageWeights) -> torch.Tensor:
        """Weighted NLL of element ``i`` given only its prefix (independent of later elements)."""
        if i < 1:
            return torch.zeros((), dtype=self.dtype)
        prefix = InterleavedSequence(list(seq.elements[:i]))
        h = self.backbone_forward(Batch.from_sequences([prefix], self.cfg))[0, -1]
        e = seq[i]
        logits = self.text_head(h[None])
        if isinstance(e, Text):
            return ops.cross_entropy_weighted(logits, torch.tensor([e.id]),
                                              torch.tensor([weights.text], dtype=self.dtype))
        marker = ops.cross_entropy_weighted(logits, torch.tensor([PATCH]),
                                            torch.tensor([weights.modality], dtype=self.dtype))
        layers, _, _ = self.decode_patch_nll(h[None], torch.from_numpy(e.frames)[None], weights.rvq)
        return marker + layers.sum()


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0,
                dtype: torch.dtype = torch.float32) -> MimoToyLM:
    torch.manual_seed(seed)
    return MimoToyLM(cfg).to(dtype)
