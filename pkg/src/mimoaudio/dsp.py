"""Waveform handling, normalized STFT, log-mel features and the multi-scale mel loss.

The differentiable core works on float64 torch tensors so the same code path
serves both feature extraction and the reconstruction loss used in training.
"""
from __future__ import annotations

import functools
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch

SAMPLE_RATE = 24000
LOG_FLOOR = 1e-5
LOSS_SCALES = (5, 6, 7)

# 100 Hz encoder-input mel at 24 kHz
ENCODER_N_MELS = 128
ENCODER_WINDOW = 480
ENCODER_HOP = 240


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise AudioError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise AudioError("invalid sample")
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelSpec:
    frames: np.ndarray  # T x n_mels, log energies
    frame_rate: float
    n_mels: int
    window: int
    hop: int
    sample_rate: int = SAMPLE_RATE
    scale_index: Optional[int] = None


@dataclass(frozen=True)
class MelScaleConfig:
    scale: int

    @property
    def n_mels(self) -> int:
        return 2 ** self.scale

    @property
    def window(self) -> int:
        return 15 * 2 ** (self.scale - 1)

    @property
    def hop(self) -> int:
        return 15 * 2 ** (self.scale - 2)


def scale_params(i: int) -> tuple[int, int, int]:
    """Return ``(n_mels, window, hop)`` for mel scale ``i``."""
    if i < 3:
        raise AudioError(f"mel scale index must be >= 3, got {i}")
    cfg = MelScaleConfig(i)
    return cfg.n_mels, cfg.window, cfg.hop


# --------------------------------------------------------------------------- STFT


@functools.lru_cache(maxsize=32)
def _hann(n: int) -> np.ndarray:
    # periodic Hann
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def num_frames(length: int, hop: int) -> int:
    return 1 + length // hop


def stft_tensor(x: torch.Tensor, window_size: int, hop: int) -> torch.Tensor:
    """Normalized STFT of ``x`` (shape ``(..., n)``), returns ``(..., T, window_size//2+1)``.

    Frames are centred with reflect padding of ``window_size // 2`` on each side
    and the Hann window is scaled by ``1 / sum(window)`` so that a unit DC input
    has unit magnitude in bin 0.
    """
    if window_size <= 0 or hop <= 0 or hop > window_size:
        raise AudioError(f"bad STFT geometry window={window_size} hop={hop}")
    n = x.shape[-1]
    if n == 0:
        raise AudioError("empty input")
    pad = window_size // 2
    if n <= pad:
        raise AudioError("input too short")
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, n)
    padded = torch.nn.functional.pad(flat, (pad, pad), mode="reflect").reshape(*lead, n + 2 * pad)
    frames = padded.unfold(-1, window_size, hop)
    win = torch.tensor(_hann(window_size), dtype=x.dtype)
    return torch.fft.rfft(frames * (win / win.sum()), n=window_size)


def stft(w: Waveform, window_size: int, hop: int) -> np.ndarray:
    return stft_tensor(torch.as_tensor(w.samples), window_size, hop).numpy()


def istft(spec: np.ndarray, window_size: int, hop: int, length: Optional[int] = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win = _hann(window_size)
    frames = np.fft.irfft(spec * win.sum(), n=window_size, axis=-1)
    t = frames.shape[0]
    pad = window_size // 2
    total = window_size + hop * (t - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for k in range(t):
        s = k * hop
        out[s:s + window_size] += frames[k] * win
        norm[s:s + window_size] += win ** 2
    out = out / np.maximum(norm, 1e-8)
    if length is None:
        length = hop * (t - 1)
    out = out[pad:pad + length]
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return out


# ---------------------------------------------------------------------- mel filters


def _hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz,
                    min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
                    f / f_sp)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@functools.lru_cache(maxsize=32)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Slaney-scale, area-normalized triangular filters over 0 Hz..Nyquist, ``(n_mels, n_fft//2+1)``."""
    n_bins = n_fft // 2 + 1
    if n_mels > n_bins:
        raise AudioError(f"n_mels={n_mels} exceeds {n_bins} frequency bins")
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def log_mel_tensor(x: torch.Tensor, n_mels: int, window: int, hop: int,
                   sample_rate: int = SAMPLE_RATE) -> torch.Tensor:
    """Log-mel power spectrogram ``(..., T, n_mels)`` of a waveform tensor."""
    if x.shape[-1] < window:
        raise AudioError("input too short")
    spec = stft_tensor(x, window, hop)
    power = spec.real ** 2 + spec.imag ** 2
    fb = torch.tensor(mel_filterbank(n_mels, window, sample_rate), dtype=power.dtype)
    return torch.log(torch.clamp(power @ fb.T, min=LOG_FLOOR))


def mel_spectrogram(w: Waveform, i: int) -> MelSpec:
    n_mels, window, hop = scale_params(i)
    frames = log_mel_tensor(torch.as_tensor(w.samples), n_mels, window, hop, w.sample_rate)
    return MelSpec(frames.numpy(), w.sample_rate / hop, n_mels, window, hop, w.sample_rate, i)


def encoder_mel(w: Waveform) -> MelSpec:
    """100 Hz, 128-bin log-mel used as tokenizer input."""
    frames = log_mel_tensor(torch.as_tensor(w.samples), ENCODER_N_MELS, ENCODER_WINDOW, ENCODER_HOP,
                            w.sample_rate)
    return MelSpec(frames.numpy(), w.sample_rate / ENCODER_HOP, ENCODER_N_MELS, ENCODER_WINDOW,
                   ENCODER_HOP, w.sample_rate)


def multiscale_mel_loss_tensor(x: torch.Tensor, y: torch.Tensor,
                               scales: Iterable[int] = LOSS_SCALES,
                               sample_rate: int = SAMPLE_RATE) -> torch.Tensor:
    if x.shape != y.shape:
        raise AudioError("length mismatch")
    total = x.new_zeros(())
    for i in scales:
        n_mels, window, hop = scale_params(i)
        sx = log_mel_tensor(x, n_mels, window, hop, sample_rate)
        sy = log_mel_tensor(y, n_mels, window, hop, sample_rate)
        total = total + (sx - sy).abs().mean()
    return total


def multiscale_mel_loss(x: Waveform, y: Waveform, scales: Iterable[int] = LOSS_SCALES) -> float:
    """Sum over scales of the mean absolute log-mel difference."""
    if len(x) != len(y) or x.sample_rate != y.sample_rate:
        raise AudioError("length mismatch")
    return float(multiscale_mel_loss_tensor(torch.as_tensor(x.samples), torch.as_tensor(y.samples),
                                            scales, x.sample_rate))


# ------------------------------------------------------------------ inverse / resample


def mel_to_linear_power(m: MelSpec) -> np.ndarray:
    fb = mel_filterbank(m.n_mels, m.window, m.sample_rate)
    mel_pow = np.exp(m.frames)
    mel_pow = np.where(m.frames <= np.log(LOG_FLOOR) + 1e-9, 0.0, mel_pow)
    return np.maximum(mel_pow @ np.linalg.pinv(fb).T, 0.0)


def griffin_lim(m: MelSpec, iterations: int = 60, seed: int = 0,
                length: Optional[int] = None) -> Waveform:
    """Reconstruct a waveform whose log-mel approaches ``m`` by Griffin-Lim phase iteration."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mag = np.sqrt(mel_to_linear_power(m))
    t = mag.shape[0]
    if length is None:
        length = m.hop * (t - 1)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    y = istft(mag * angles, m.window, m.hop, length)
    for _ in range(iterations - 1):
        spec = stft_tensor(torch.as_tensor(y), m.window, m.hop).numpy()
        if spec.shape[0] != t:
            spec = spec[:t] if spec.shape[0] > t else np.pad(spec, ((0, t - spec.shape[0]), (0, 0)))
        angles = np.exp(1j * np.angle(spec))
        y = istft(mag * angles, m.window, m.hop, length)
    return Waveform(np.clip(y, -1.0, 1.0), m.sample_rate)


def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise AudioError("target_rate must be positive")
    n = len(w)
    out_len = int(round(n * target_rate / w.sample_rate))
    if n == 0 or out_len == 0:
        return Waveform(np.zeros(out_len), target_rate)
    pos = np.arange(out_len) * (w.sample_rate / target_rate)
    return Waveform(np.interp(pos, np.arange(n), w.samples), target_rate)


# ------------------------------------------------------------------------------ WAV


def read_wav(path: Union[str, Path]) -> Waveform:
    """Read a 16-bit PCM mono RIFF file."""
    if Path(path).exists() and Path(path).stat().st_size == 0:
        raise AudioError(f"{path}: empty input")
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: unsupported or corrupt WAV ({exc})") from exc
    if channels != 1:
        raise AudioError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if n == 0:
        raise AudioError(f"{path}: empty input")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, rate)


def write_wav(path: Union[str, Path], w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


def sine(freq: float, seconds: float, sample_rate: int = SAMPLE_RATE, amplitude: float = 0.5,
         phase: float = 0.0) -> Waveform:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t + phase), sample_rate)


def dominant_bin(w: Waveform, window: int, hop: int) -> int:
    mag = np.abs(stft(w, window, hop))
    return int(np.argmax(mag.mean(axis=0)))
