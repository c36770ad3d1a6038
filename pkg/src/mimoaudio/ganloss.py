"""Adversarial losses, composite objectives and toy discriminators."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsp

LAMBDA_RECON = 1.0
LAMBDA_ADV = 1.0
LAMBDA_FM = 2.0
LAMBDA_A2T = 10.0
LAMBDA_COMMIT = 1.0
MPD_PERIODS = (2, 3, 5, 7, 11)
STFT_SCALES = dsp.LOSS_SCALES

ScoreSet = Sequence[torch.Tensor]
FeatureSet = Sequence[Sequence[torch.Tensor]]


class GanLossError(ValueError):
    pass


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def hinge_d_loss(real: ScoreSet, fake: ScoreSet) -> torch.Tensor:
    """Mean over sub-discriminators of ``E[max(0, 1 - real)] + E[max(0, 1 + fake)]``."""
    if len(real) != len(fake) or not real:
        raise GanLossError(f"sub-discriminator count mismatch: {len(real)} real vs {len(fake)} fake")
    terms = [F.relu(1 - _t(r)).mean() + F.relu(1 + _t(f)).mean() for r, f in zip(real, fake)]
    return torch.stack(terms).mean()


def hinge_g_loss(fake: ScoreSet) -> torch.Tensor:
    if not fake:
        raise GanLossError("need at least one sub-discriminator")
    return -torch.stack([_t(f).mean() for f in fake]).mean()


def feature_matching_loss(real: FeatureSet, fake: FeatureSet) -> torch.Tensor:
    if len(real) != len(fake) or not real:
        raise GanLossError(f"sub-discriminator count mismatch: {len(real)} vs {len(fake)}")
    per_k = []
    for k, (rk, fk) in enumerate(zip(real, fake)):
        if len(rk) != len(fk) or not rk:
            raise GanLossError(f"feature list length mismatch at k={k}: {len(rk)} vs {len(fk)}")
        layers = []
        for l, (a, b) in enumerate(zip(rk, fk)):
            a, b = _t(a), _t(b)
            if a.shape != b.shape:
                raise GanLossError(f"feature shape mismatch at (k={k}, l={l}): "
                                   f"{tuple(a.shape)} vs {tuple(b.shape)}")
            layers.append((a - b).abs().mean())
        per_k.append(torch.stack(layers).mean())
    return torch.stack(per_k).mean()


def generator_total(recon, adv, fm, lambda_recon: float = LAMBDA_RECON, lambda_adv: float = LAMBDA_ADV,
                    lambda_fm: float = LAMBDA_FM):
    return lambda_recon * recon + lambda_adv * adv + lambda_fm * fm


def stage1_total(a2t, recon, commit, lambda_a2t: float = LAMBDA_A2T, lambda_recon: float = LAMBDA_RECON,
                 lambda_commit: float = LAMBDA_COMMIT):
    return lambda_a2t * a2t + lambda_recon * recon + lambda_commit * commit


# ------------------------------------------------------------- discriminator inputs


def mpd_fold(w, period: int):
    """Right-pad with zeros to a multiple of ``period`` and reshape row-major to ``(..., rows, period)``."""
    if period < 1:
        raise GanLossError("period must be >= 1")
    x = w.samples if isinstance(w, dsp.Waveform) else w
    is_np = not isinstance(x, torch.Tensor)
    x = _t(x)
    n = x.shape[-1]
    rows = -(-n // period)
    x = F.pad(x, (0, rows * period - n))
    out = x.reshape(*x.shape[:-1], rows, period)
    return out.numpy() if is_np else out


def mpd_unfold(m, length: int | None = None):
    x = _t(m)
    flat = x.reshape(*x.shape[:-2], -1)
    return flat if length is None else flat[..., :length]


def stft_stack(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Log-magnitude normalized STFT ``(..., T, F)`` at the window/hop of mel scale ``scale``."""
    _, window, hop = dsp.scale_params(scale)
    spec = dsp.stft_tensor(x, window, hop)
    return torch.log(spec.abs() + dsp.LOG_FLOOR)


# ------------------------------------------------------------------ discriminators


class SNConv2d(nn.Module):
    """Conv2d whose weight is divided by a one-step power-iteration spectral-norm estimate."""

    def __init__(self, c_in: int, c_out: int, kernel, stride=1, padding=0, zero_init: bool = False):
        super().__init__()
        kernel = kernel if isinstance(kernel, tuple) else (kernel, kernel)
        w = torch.zeros(c_out, c_in, *kernel) if zero_init else \
            torch.randn(c_out, c_in, *kernel) / math.sqrt(c_in * kernel[0] * kernel[1])
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride, self.padding = stride, padding
        self.register_buffer("u", F.normalize(torch.randn(c_out), dim=0))

    def normalized_weight(self) -> torch.Tensor:
        mat = self.weight.reshape(self.weight.shape[0], -1)
        # differentiated through the single iteration, so autograd matches finite differences
        v = F.normalize(mat.T @ self.u.clone().to(mat.dtype), dim=0, eps=1e-12)
        u = F.normalize(mat @ v, dim=0, eps=1e-12)
        if self.training:
            with torch.no_grad():
                self.u.copy_(u.detach().to(self.u.dtype))
        sigma = torch.dot(u, mat @ v)
        return self.weight / sigma.clamp(min=1e-8)

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)


class ToyDiscriminator(nn.Module):
    """Small SN-conv stack over a 2-D view of the waveform (period fold or STFT)."""

    def __init__(self, kind: str, param: int, channels: Sequence[int] = (8, 16),
                 zero_init: bool = False):
        super().__init__()
        if kind not in ("period", "stft"):
            raise ValueError(f"unknown discriminator kind {kind!r}")
        self.kind, self.param = kind, param
        if kind == "period":
            kernel, stride, pad = (5, 1), (3, 1), (2, 0)
        else:
            kernel, stride, pad = (3, 3), (1, 2), (1, 1)
        layers, c = [], 1
        for ch in channels:
            layers.append(SNConv2d(c, ch, kernel, stride, pad, zero_init))
            c = ch
        self.convs = nn.ModuleList(layers)
        self.post = SNConv2d(c, 1, (3, 1) if kind == "period" else (3, 3), 1,
                             (1, 0) if kind == "period" else (1, 1), zero_init)

    @property
    def num_features(self) -> int:
        return len(self.convs) + 1

    def prepare(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "period":
            return mpd_fold(x, self.param)[:, None]
        return stft_stack(x, self.param)[:, None]

    def forward(self, x: torch.Tensor):
        """``x``: ``B x n`` waveforms. Returns (``B x locations`` scores, feature list)."""
        h = self.prepare(x)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            feats.append(h)
        h = self.post(h)
        feats.append(h)
        return h.flatten(1), feats


class MultiDiscriminator(nn.Module):
    def __init__(self, periods: Sequence[int] = MPD_PERIODS, scales: Sequence[int] = STFT_SCALES,
                 zero_init: bool = False):
        super().__init__()
        subs = [ToyDiscriminator("period", p, zero_init=zero_init) for p in periods]
        subs += [ToyDiscriminator("stft", s, zero_init=zero_init) for s in scales]
        self.subs = nn.ModuleList(subs)

    def forward(self, x):
        scores, feats = [], []
        for d in self.subs:
            s, f = d(x)
            scores.append(s)
            feats.append(f)
        return scores, feats


def toy_discriminator(x, d: ToyDiscriminator):
    """Score and features of a single sub-discriminator for waveforms ``x`` (``B x n``)."""
    x = _t(x)
    if x.dim() == 1:
        x = x[None]
    return d(x.to(d.post.weight.dtype))


# -------------------------------------------------------------------- smoke run


class ToyGenerator(nn.Module):
    """Frame-rate features (``B x M x F``) to waveform via a per-frame linear synthesis."""

    def __init__(self, n_features: int, samples_per_frame: int = 960):
        super().__init__()
        self.proj = nn.Linear(n_features, samples_per_frame)
        nn.init.normal_(self.proj.weight, std=0.01)
        nn.init.zeros_(self.proj.bias)

    def forward(self, feats):
        y = torch.tanh(self.proj(feats))
        return y.reshape(feats.shape[0], -1)


def frame_features(w: torch.Tensor, frames: int) -> torch.Tensor:
    """Encoder-input mel averaged over 4 frames (100 Hz -> 25 Hz)."""
    mel = dsp.log_mel_tensor(w, dsp.ENCODER_N_MELS, dsp.ENCODER_WINDOW, dsp.ENCODER_HOP)
    mel = mel[..., : frames * 4, :]
    return mel.reshape(*mel.shape[:-2], frames, 4, mel.shape[-1]).mean(-2)


@dataclass
class GanSmokeResult:
    history: list

    @property
    def all_finite(self) -> bool:
        return all(math.isfinite(v) for h in self.history for v in h.values())

    @property
    def d_loss_range(self) -> tuple[float, float]:
        vals = [h["d_loss"] for h in self.history]
        return min(vals), max(vals)


def synthetic_waveforms(batch: int, seconds: float, rng: np.random.Generator) -> torch.Tensor:
    n = int(round(seconds * dsp.SAMPLE_RATE))
    t = np.arange(n) / dsp.SAMPLE_RATE
    out = np.zeros((batch, n))
    for b in range(batch):
        for _ in range(3):
            f = rng.uniform(100, 4000)
            out[b] += rng.uniform(0.05, 0.25) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return torch.from_numpy(out).float()


def gan_smoke(steps: int = 200, batch: int = 4, seconds: float = 0.32, seed: int = 0,
              lr: float = 1e-4) -> GanSmokeResult:
    """Alternate discriminator and generator updates; records every loss per step."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    frames = int(round(seconds * 25))
    gen_net = ToyGenerator(dsp.ENCODER_N_MELS)
    disc = MultiDiscriminator()
    opt_g = torch.optim.Adam(gen_net.parameters(), lr=lr, betas=(0.8, 0.99))
    # no weight decay on the discriminators
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr, betas=(0.8, 0.99), weight_decay=0.0)
    history = []
    for step in range(steps):
        real = synthetic_waveforms(batch, seconds, rng)
        feats = frame_features(real, frames)
        fake = gen_net(feats)[:, : real.shape[1]]

        real_s, _ = disc(real)
        fake_s, _ = disc(fake.detach())
        d_loss = hinge_d_loss(real_s, fake_s)
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        real_s, real_f = disc(real)
        fake_s, fake_f = disc(fake)
        recon = dsp.multiscale_mel_loss_tensor(real, fake)
        adv = hinge_g_loss(fake_s)
        fm = feature_matching_loss([[f.detach() for f in fs] for fs in real_f], fake_f)
        g_loss = generator_total(recon, adv, fm)
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        history.append({"step": step, "d_loss": d_loss.item(), "g_loss": g_loss.item(),
                        "recon": recon.item(), "adv": adv.item(), "fm": fm.item()})
    return GanSmokeResult(history)
