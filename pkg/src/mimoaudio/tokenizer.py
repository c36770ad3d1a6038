"""Toy audio tokenizer: 100 Hz mel -> 4-frame averaging -> linear map -> RVQ at 25 Hz.

The linear map and its decoder-side transpose are trained together with the EMA
codebooks; they are stored next to the codebook file as ``<codebooks>.proj``
(a MIMP parameter checkpoint).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from . import dsp, rvq
from .nn import checkpoint

DOWNSAMPLE = 4
FRAME_RATE = dsp.SAMPLE_RATE / dsp.ENCODER_HOP / DOWNSAMPLE  # 25 Hz


def frame_count(num_samples: int) -> int:
    return dsp.num_frames(num_samples, dsp.ENCODER_HOP) // DOWNSAMPLE


def frame_features(w: dsp.Waveform) -> np.ndarray:
    """``M x 128`` log-mel averaged over groups of 4 frames, ``M = floor(T / 4)``."""
    mel = dsp.encoder_mel(w).frames
    m = mel.shape[0] // DOWNSAMPLE
    return mel[: m * DOWNSAMPLE].reshape(m, DOWNSAMPLE, mel.shape[1]).mean(1)


@dataclass
class Codec:
    state: rvq.RvqState
    mean: np.ndarray      # 128
    enc: np.ndarray       # 128 x dim
    dec: np.ndarray       # dim x 128

    @property
    def sizes(self) -> list[int]:
        return self.state.sizes

    def latents(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean) @ self.enc

    def encode(self, w: dsp.Waveform) -> np.ndarray:
        if w.sample_rate != dsp.SAMPLE_RATE:
            raise dsp.AudioError(f"expected {dsp.SAMPLE_RATE} Hz audio, got {w.sample_rate}")
        feats = frame_features(w)
        if feats.shape[0] == 0:
            return np.zeros((0, self.state.num_layers), dtype=np.int64)
        return rvq.quantize(self.latents(feats), self.state).indices

    def decode_features(self, indices: np.ndarray) -> np.ndarray:
        return rvq.dequantize(indices, self.state) @ self.dec + self.mean

    def decode(self, indices: np.ndarray, iterations: int = 32, seed: int = 0) -> dsp.Waveform:
        feats = self.decode_features(indices)
        mel = np.repeat(feats, DOWNSAMPLE, axis=0)
        spec = dsp.MelSpec(mel, dsp.SAMPLE_RATE / dsp.ENCODER_HOP, dsp.ENCODER_N_MELS,
                           dsp.ENCODER_WINDOW, dsp.ENCODER_HOP)
        length = indices.shape[0] * DOWNSAMPLE * dsp.ENCODER_HOP
        return dsp.griffin_lim(spec, iterations, seed=seed, length=length)

    # ------------------------------------------------------------------ storage

    def save(self, path: Union[str, Path]) -> None:
        rvq.save_codebooks(path, self.state)
        checkpoint.save_params(proj_path(path), OrderedDict(
            mean=torch.from_numpy(self.mean), enc=torch.from_numpy(self.enc), dec=torch.from_numpy(self.dec)))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Codec":
        state = rvq.load_codebooks(path)
        pp = proj_path(path)
        if not pp.exists():
            raise FileNotFoundError(f"missing projection file {pp}")
        p = checkpoint.load_params(pp)
        return cls(state, p["mean"].double().numpy(), p["enc"].double().numpy(), p["dec"].double().numpy())


def proj_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".proj")


def train_codec(features: np.ndarray, sizes: Sequence[int], dim: int = 32, epochs: int = 20,
                batch_size: int = 512, lr: float = 1e-3, seed: int = 0) -> tuple[Codec, list]:
    """Jointly fit the linear map (Adam, straight-through) and EMA codebooks on ``M x 128`` features."""
    rng = np.random.default_rng(seed)
    feats = np.asarray(features, dtype=np.float64)
    mean = feats.mean(0)
    centered = feats - mean
    # PCA start for the map
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:dim].T
    if basis.shape[1] < dim:
        basis = np.pad(basis, ((0, 0), (0, dim - basis.shape[1])))
    enc = torch.tensor(basis, requires_grad=True)
    dec = torch.tensor(basis.T.copy(), requires_grad=True)
    opt = torch.optim.Adam([enc, dec], lr=lr)
    state = rvq.RvqState.random(sizes, dim, seed=seed)
    z0 = centered @ basis
    rvq.init_kmeanspp(state, z0[rng.permutation(z0.shape[0])[: max(batch_size, max(sizes))]], seed)
    x_all = torch.from_numpy(centered)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(feats.shape[0])
        for start in range(0, feats.shape[0], batch_size):
            x = x_all[order[start:start + batch_size]]
            z = x @ enc
            q = rvq.quantize(z.detach().numpy(), state)
            rvq.ema_update(state, q.residuals, q.indices, rng)
            zq = rvq.straight_through(z, q.quantized)
            recon = ((zq @ dec - x) ** 2).mean()
            loss = recon + rvq.commitment_loss(z, q.quantized)
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append({"epoch": epoch, "recon": recon.item(), "loss": loss.item()})
    codec = Codec(state, mean, enc.detach().numpy().copy(), dec.detach().numpy().copy())
    return codec, history
