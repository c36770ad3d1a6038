"""Audio patches, the per-layer delay codec and text/patch interleaving."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

EMPTY = -1
DEFAULT_G = 4
DEFAULT_DELAYS = (0, 1, 2, 3, 4, 5, 6, 7)
FRAME_RATE = 25.0

JOINT_TEXT_WEIGHT = 100.0
JOINT_RVQ_WEIGHTS = (12.0, 8.0, 6.0, 4.0, 2.0, 2.0, 1.0, 1.0)
UNDERSTANDING_TEXT_WEIGHT = 1.0
UNDERSTANDING_RVQ_WEIGHTS = (0.0,) * 8


class FramingError(ValueError):
    pass


@dataclass(frozen=True)
class DelayConfig:
    delays: tuple[int, ...] = DEFAULT_DELAYS
    max_delay: int = 64

    def __post_init__(self):
        d = tuple(int(v) for v in self.delays)
        if not d:
            raise FramingError("delay config needs at least one layer")
        if any(v < 0 or v >= self.max_delay for v in d):
            raise FramingError(f"delays must lie in [0, {self.max_delay}), got {d}")
        object.__setattr__(self, "delays", d)

    @property
    def num_layers(self) -> int:
        return len(self.delays)

    def delayed_length(self, g: int) -> int:
        return g + max(self.delays)


@dataclass(frozen=True)
class Patch:
    """``G x R'`` token indices. Frames beyond ``valid`` are EMPTY padding."""

    frames: np.ndarray
    valid: int = -1

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.int64)
        if f.ndim != 2:
            raise FramingError(f"patch must be 2-D (G x R'), got shape {f.shape}")
        object.__setattr__(self, "frames", f)
        if self.valid < 0:
            object.__setattr__(self, "valid", f.shape[0])

    @property
    def g(self) -> int:
        return self.frames.shape[0]

    @property
    def num_layers(self) -> int:
        return self.frames.shape[1]

    @property
    def padded(self) -> bool:
        return self.valid < self.g

    def check_range(self, sizes: Sequence[int]) -> None:
        f = self.frames
        ok = (f == EMPTY) | ((f >= 0) & (f < np.asarray(sizes)[None, :]))
        if not ok.all():
            raise FramingError("index out of range")

    def __eq__(self, other):
        return isinstance(other, Patch) and self.valid == other.valid and np.array_equal(self.frames, other.frames)

    def __hash__(self):
        return hash((self.frames.tobytes(), self.frames.shape, self.valid))


@dataclass(frozen=True)
class DelayedPatch:
    """``(G + max(D)) x R'`` slots after the delay transform; EMPTY where undefined."""

    frames: np.ndarray
    delays: DelayConfig
    g: int

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.int64)
        object.__setattr__(self, "frames", f)
        if f.ndim != 2 or f.shape[0] != self.delays.delayed_length(self.g) \
                or f.shape[1] != self.delays.num_layers:
            raise FramingError(
                f"malformed delayed patch: shape {f.shape}, expected "
                f"({self.delays.delayed_length(self.g)}, {self.delays.num_layers})")
        if np.any(f[~delay_mask(self.g, self.delays)] != EMPTY):
            raise FramingError("inconsistent delay pattern")


# -------------------------------------------------------------------------- patches


def patchify(a: np.ndarray, g: int = DEFAULT_G) -> list[Patch]:
    if g < 1:
        raise FramingError("G must be >= 1")
    a = np.asarray(a, dtype=np.int64)
    if a.ndim != 2:
        raise FramingError(f"token matrix must be M x R', got shape {a.shape}")
    patches = []
    for start in range(0, a.shape[0], g):
        chunk = a[start:start + g]
        valid = chunk.shape[0]
        if valid < g:
            chunk = np.vstack([chunk, np.full((g - valid, a.shape[1]), EMPTY, dtype=np.int64)])
        patches.append(Patch(chunk, valid))
    return patches


def unpatchify(ps: Sequence[Patch], num_layers: int = 0) -> np.ndarray:
    if not ps:
        return np.zeros((0, num_layers), dtype=np.int64)
    g = ps[0].g
    if any(p.g != g for p in ps):
        raise FramingError("inconsistent G across patches")
    if any(p.num_layers != ps[0].num_layers for p in ps):
        raise FramingError("inconsistent R' across patches")
    return np.vstack([p.frames[:p.valid] for p in ps])


# ---------------------------------------------------------------------------- delay


def delay_mask(g: int, d: DelayConfig) -> np.ndarray:
    """Boolean ``(G + max(D)) x R'`` mask, True where a slot carries a real token."""
    i = np.arange(d.delayed_length(g))[:, None]
    shift = i - np.asarray(d.delays)[None, :]
    return (shift >= 0) & (shift < g)


def delay_apply(p: Patch, d: DelayConfig = DelayConfig()) -> DelayedPatch:
    if p.num_layers != d.num_layers:
        raise FramingError(f"delay config has {d.num_layers} layers, patch has {p.num_layers}")
    out = np.full((d.delayed_length(p.g), p.num_layers), EMPTY, dtype=np.int64)
    for r, dr in enumerate(d.delays):
        out[dr:dr + p.g, r] = p.frames[:, r]
    return DelayedPatch(out, d, p.g)


def delay_remove(p: Union[DelayedPatch, np.ndarray], d: DelayConfig = DelayConfig(),
                 g: int = DEFAULT_G) -> Patch:
    frames = p.frames if isinstance(p, DelayedPatch) else np.asarray(p, dtype=np.int64)
    # revalidates length and EMPTY slots
    DelayedPatch(frames, d, g)
    out = np.empty((g, d.num_layers), dtype=np.int64)
    for r, dr in enumerate(d.delays):
        out[:, r] = frames[dr:dr + g, r]
    valid = g
    while valid > 0 and np.all(out[valid - 1] == EMPTY):
        valid -= 1
    return Patch(out, valid if valid < g else g)


# ---------------------------------------------------------------------- interleaving


@dataclass(frozen=True)
class Text:
    id: int


Element = Union[Text, Patch]


@dataclass
class InterleavedSequence:
    elements: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self) -> Iterator[Element]:
        return iter(self.elements)

    def __getitem__(self, i):
        return self.elements[i]

    @property
    def text_ids(self) -> list[int]:
        return [e.id for e in self.elements if isinstance(e, Text)]

    @property
    def patches(self) -> list[Patch]:
        return [e for e in self.elements if isinstance(e, Patch)]

    def pattern(self) -> list[tuple[str, int]]:
        """Run-length view, e.g. ``[("t", 5), ("p", 5)]``."""
        runs: list[tuple[str, int]] = []
        for e in self.elements:
            kind = "t" if isinstance(e, Text) else "p"
            if runs and runs[-1][0] == kind:
                runs[-1] = (kind, runs[-1][1] + 1)
            else:
                runs.append((kind, 1))
        return runs


def interleave_schedule(text: Sequence[int], patches: Sequence[Patch],
                        ratio: tuple[int, int] = (5, 5)) -> InterleavedSequence:
    """Alternate runs of ``ratio[0]`` text tokens and ``ratio[1]`` patches, text first.

    When one stream runs out the rest of the other is appended as is.
    """
    t, s = ratio
    if t < 1 or s < 1:
        raise FramingError("ratio components must be >= 1")
    out: list = []
    ti = pi = 0
    while ti < len(text) and pi < len(patches):
        out.extend(Text(int(x)) for x in text[ti:ti + t])
        ti += t
        if ti >= len(text):
            break
        out.extend(patches[pi:pi + s])
        pi += s
    out.extend(Text(int(x)) for x in text[ti:])
    out.extend(patches[pi:])
    return InterleavedSequence(out)


def loss_weight_mask(seq: InterleavedSequence, text_w: float, rvq_w: Sequence[float]) -> list:
    """Per-element weights: a float per text token, a ``G x R'`` array per patch (0 on EMPTY)."""
    rvq_w = np.asarray(rvq_w, dtype=np.float64)
    out = []
    for e in seq:
        if isinstance(e, Text):
            out.append(float(text_w))
            continue
        if e.num_layers != rvq_w.shape[0]:
            raise FramingError(f"{rvq_w.shape[0]} RVQ weights for a patch with {e.num_layers} layers")
        out.append(np.where(e.frames == EMPTY, 0.0, rvq_w[None, :]))
    return out


def total_weight(weights: list) -> float:
    return float(sum(np.sum(w) for w in weights))


def tokens_per_second(frame_rate: float = FRAME_RATE, num_layers: int = 8) -> float:
    return frame_rate * num_layers
