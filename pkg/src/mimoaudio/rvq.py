"""Residual vector quantization: codebooks, quantize/dequantize, commitment loss, EMA learning."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

TOKENIZER_LAYERS = 20
LM_LAYERS = 8
EMA_DECAY = 0.99
EMA_EPS = 1e-5
DEAD_THRESHOLD = 0.01
CKPT_MAGIC = b"RVQ1"


class RvqError(ValueError):
    pass


def codebook_sizes(layers: int = LM_LAYERS) -> list[int]:
    """First two layers hold 1024 entries, the rest 128."""
    return [1024 if r < 2 else 128 for r in range(layers)]


@dataclass
class Codebook:
    entries: np.ndarray
    ema_counts: np.ndarray = None
    ema_sums: np.ndarray = None
    decay: float = EMA_DECAY

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise RvqError("codebook needs at least 2 entries of shape K x dim")
        if self.ema_counts is None:
            self.ema_counts = np.ones(self.size)
        if self.ema_sums is None:
            self.ema_sums = self.entries.copy()

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class RvqState:
    layers: list[Codebook] = field(default_factory=list)

    def __post_init__(self):
        dims = {cb.dim for cb in self.layers}
        if len(dims) > 1:
            raise RvqError(f"codebooks disagree on dim: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def sizes(self) -> list[int]:
        return [cb.size for cb in self.layers]

    @classmethod
    def random(cls, sizes: Sequence[int], dim: int, seed: int = 0, scale: float = 1.0,
               decay: float = EMA_DECAY) -> "RvqState":
        rng = np.random.default_rng(seed)
        layers = []
        for r, k in enumerate(sizes):
            layers.append(Codebook(rng.normal(scale=scale / (r + 1), size=(k, dim)), decay=decay))
        return cls(layers)

    def truncated(self, n: int) -> "RvqState":
        return RvqState(self.layers[:n])

    def with_zero_entry(self) -> "RvqState":
        """Copy with entry 0 of every codebook set to the zero vector."""
        layers = []
        for cb in self.layers:
            e = cb.entries.copy()
            e[0] = 0.0
            layers.append(Codebook(e, decay=cb.decay))
        return RvqState(layers)


@dataclass
class Quantized:
    indices: np.ndarray    # M x R
    quantized: np.ndarray  # M x dim, running sum of chosen entries
    residuals: np.ndarray  # (R + 1) x M x dim; residuals[r] is the input to layer r


def nearest(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the closest entry (squared Euclidean) per row; ties go to the lowest index."""
    d = (x * x).sum(1)[:, None] - 2.0 * x @ entries.T + (entries * entries).sum(1)[None, :]
    best = d.min(axis=1)
    # the expanded form can misorder near-ties; settle candidates with direct distances
    scale = (x * x).sum(1) + (entries * entries).sum(1).max()
    close = d <= (best + 1e-9 * (1.0 + scale))[:, None]
    idx = np.argmax(close, axis=1)
    ambiguous = np.flatnonzero(close.sum(1) > 1)
    for i in ambiguous:
        cand = np.flatnonzero(close[i])
        exact = ((x[i] - entries[cand]) ** 2).sum(1)
        idx[i] = cand[np.argmin(exact)]
    return idx


def quantize(x: np.ndarray, s: RvqState, n_layers: Optional[int] = None) -> Quantized:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != s.dim:
        raise RvqError(f"expected vectors of dim {s.dim}, got shape {x.shape}")
    layers = s.layers if n_layers is None else s.layers[:n_layers]
    m = x.shape[0]
    indices = np.zeros((m, len(layers)), dtype=np.int64)
    residuals = np.zeros((len(layers) + 1, m, s.dim))
    q = np.zeros_like(x)
    res = x.copy()
    residuals[0] = res
    for r, cb in enumerate(layers):
        idx = nearest(res, cb.entries)
        chosen = cb.entries[idx]
        indices[:, r] = idx
        q += chosen
        res = res - chosen
        residuals[r + 1] = res
    return Quantized(indices, q, residuals)


def dequantize(a: np.ndarray, s: RvqState) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[1] > s.num_layers:
        raise RvqError(f"token matrix shape {a.shape} incompatible with {s.num_layers} layers")
    out = np.zeros((a.shape[0], s.dim))
    for r in range(a.shape[1]):
        col = a[:, r]
        if np.any(col < 0) or np.any(col >= s.layers[r].size):
            raise RvqError("index out of range")
        out += s.layers[r].entries[col]
    return out


def commitment_loss(x, q) -> torch.Tensor:
    """Mean squared error between ``x`` and the detached quantized vectors ``q``."""
    x = torch.as_tensor(x)
    q = torch.as_tensor(q, dtype=x.dtype)
    if x.shape != q.shape:
        raise RvqError(f"shape mismatch {tuple(x.shape)} vs {tuple(q.shape)}")
    return ((x - q.detach()) ** 2).mean()


def straight_through(x: torch.Tensor, q) -> torch.Tensor:
    """Forward value ``q``, gradient w.r.t. ``x`` is the identity."""
    q = torch.as_tensor(q, dtype=x.dtype)
    return x + (q - x).detach()


# ------------------------------------------------------------------------ learning


def kmeanspp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding: per step, draw several D^2 candidates and keep the best."""
    n = data.shape[0]
    trials = 2 + int(np.log(k))
    centers = [data[rng.integers(n)]]
    d2 = ((data - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(data[rng.integers(n)])
            continue
        cand = rng.choice(n, size=trials, p=d2 / total)
        cand_d2 = np.minimum(d2[None, :], ((data[None, :, :] - data[cand][:, None, :]) ** 2).sum(-1))
        best = int(np.argmin(cand_d2.sum(1)))
        centers.append(data[cand[best]])
        d2 = cand_d2[best]
    return np.stack(centers)


def init_kmeanspp(s: RvqState, batch: np.ndarray, seed: int = 0) -> RvqState:
    """Seed every layer's codebook by k-means++ on that layer's residual input."""
    rng = np.random.default_rng(seed)
    res = np.asarray(batch, dtype=np.float64)
    for cb in s.layers:
        cb.entries = kmeanspp(res, cb.size, rng)
        cb.ema_counts = np.ones(cb.size)
        cb.ema_sums = cb.entries.copy()
        res = res - cb.entries[nearest(res, cb.entries)]
    return s


def ema_update(s: RvqState, residuals: np.ndarray, assignments: np.ndarray,
               rng: Optional[np.random.Generator] = None) -> RvqState:
    """One EMA step on every layer, in place.

    ``residuals[r]`` holds the vectors layer ``r`` quantized and ``assignments[:, r]``
    the entries it chose. Entries whose count falls below the dead-code threshold are
    reseeded from random vectors of the batch.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    assignments = np.asarray(assignments)
    if assignments.size == 0 or residuals.shape[1] == 0:
        return s
    if rng is None:
        rng = np.random.default_rng(0)
    n_layers = assignments.shape[1]
    if residuals.shape[0] < n_layers or residuals.shape[1] != assignments.shape[0]:
        raise RvqError("assignments inconsistent with batch")
    for r in range(n_layers):
        cb = s.layers[r]
        vecs = residuals[r]
        idx = assignments[:, r]
        onehot_counts = np.bincount(idx, minlength=cb.size).astype(np.float64)
        sums = np.zeros_like(cb.entries)
        np.add.at(sums, idx, vecs)
        cb.ema_counts = cb.decay * cb.ema_counts + (1 - cb.decay) * onehot_counts
        cb.ema_sums = cb.decay * cb.ema_sums + (1 - cb.decay) * sums
        cb.entries = cb.ema_sums / np.maximum(cb.ema_counts, EMA_EPS)[:, None]
        dead = np.flatnonzero(cb.ema_counts < DEAD_THRESHOLD)
        if dead.size:
            picks = vecs[rng.integers(vecs.shape[0], size=dead.size)]
            cb.entries[dead] = picks
            cb.ema_sums[dead] = picks
            cb.ema_counts[dead] = 1.0
    return s


def lloyd(data: np.ndarray, k: int, iters: int = 300, seed: int = 0,
          restarts: int = 1) -> tuple[np.ndarray, float]:
    """Plain Lloyd k-means from k-means++ seeds; returns (centers, per-element MSE).

    With ``restarts > 1`` the best of that many independent starts is kept.
    """
    data = np.asarray(data, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        centers = kmeanspp(data, k, rng)
        for _ in range(iters):
            idx = nearest(data, centers)
            new = centers.copy()
            for j in range(k):
                members = data[idx == j]
                if members.shape[0]:
                    new[j] = members.mean(0)
            if np.allclose(new, centers, rtol=0, atol=1e-12):
                break
            centers = new
        idx = nearest(data, centers)
        mse = float(np.mean((data - centers[idx]) ** 2))
        if best is None or mse < best[1]:
            best = (centers, mse)
    return best


def quantization_mse(x: np.ndarray, s: RvqState, n_layers: Optional[int] = None) -> float:
    q = quantize(x, s, n_layers)
    return float(np.mean((x - q.quantized) ** 2))


def train_ema(data: np.ndarray, s: RvqState, epochs: int = 30, batch_size: int = 1000,
              seed: int = 0, init: bool = True) -> RvqState:
    rng = np.random.default_rng(seed)
    data = np.asarray(data, dtype=np.float64)
    if init:
        init_kmeanspp(s, data[rng.permutation(data.shape[0])[:max(batch_size, max(s.sizes))]], seed)
    for _ in range(epochs):
        order = rng.permutation(data.shape[0])
        for start in range(0, data.shape[0], batch_size):
            batch = data[order[start:start + batch_size]]
            q = quantize(batch, s)
            ema_update(s, q.residuals, q.indices, rng)
    return s


# ---------------------------------------------------------------------- checkpoint


def save_codebooks(path: Union[str, Path], s: RvqState) -> None:
    """``RVQ1`` | u32 dim | u32 layers | per layer: u32 K, K*dim float32 (little-endian)."""
    Path(path).write_bytes(codebooks_to_bytes(s))


def codebooks_to_bytes(s: RvqState) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", s.dim, s.num_layers)]
    for cb in s.layers:
        parts.append(struct.pack("<I", cb.size))
        parts.append(cb.entries.astype("<f4").tobytes())
    return b"".join(parts)


def codebooks_from_bytes(buf: bytes) -> RvqState:
    if buf[:4] != CKPT_MAGIC:
        raise RvqError("bad magic: not an RVQ1 codebook file")
    try:
        dim, n = struct.unpack_from("<II", buf, 4)
        off = 12
        layers = []
        for _ in range(n):
            (k,) = struct.unpack_from("<I", buf, off)
            off += 4
            nbytes = 4 * k * dim
            if off + nbytes > len(buf):
                raise RvqError("truncated codebook file")
            entries = np.frombuffer(buf, dtype="<f4", count=k * dim, offset=off).reshape(k, dim)
            off += nbytes
            layers.append(Codebook(entries.astype(np.float64)))
    except struct.error as exc:
        raise RvqError("truncated codebook file") from exc
    if off != len(buf):
        raise RvqError("trailing bytes in codebook file")
    return RvqState(layers)


def load_codebooks(path: Union[str, Path]) -> RvqState:
    return codebooks_from_bytes(Path(path).read_bytes())
