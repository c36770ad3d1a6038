"""Model, stage and optimizer configuration plus the key-value config file format."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

from ..framing import (DEFAULT_DELAYS, DEFAULT_G, JOINT_RVQ_WEIGHTS, JOINT_TEXT_WEIGHT,
                       UNDERSTANDING_RVQ_WEIGHTS, UNDERSTANDING_TEXT_WEIGHT, DelayConfig)
from ..rvq import codebook_sizes

BYTE_VOCAB = 256
AUDIO_BEGIN = 256
AUDIO_END = 257
PATCH = 258  # text-head target meaning "the next element is an audio patch"
EOS = 259
TEXT_VOCAB = 260
CONTROL_NAMES = {AUDIO_BEGIN: "<AUDIO_BEGIN>", AUDIO_END: "<AUDIO_END>", PATCH: "<PATCH>", EOS: "<EOS>"}


@dataclass(frozen=True)
class ModelConfig:
    audio_vocab: tuple[int, ...] = tuple(codebook_sizes(8))
    delays: tuple[int, ...] = DEFAULT_DELAYS
    g: int = DEFAULT_G
    text_vocab: int = TEXT_VOCAB
    enc_dim: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    backbone_dim: int = 128
    backbone_layers: int = 4
    backbone_heads: int = 4
    context: int = 64
    dec_layers: int = 2
    dec_heads: int = 4

    def __post_init__(self):
        object.__setattr__(self, "audio_vocab", tuple(int(k) for k in self.audio_vocab))
        object.__setattr__(self, "delays", tuple(int(d) for d in self.delays))
        if len(self.audio_vocab) != len(self.delays):
            raise ValueError(f"{len(self.audio_vocab)} codebooks but {len(self.delays)} delays")
        if self.text_vocab < TEXT_VOCAB:
            raise ValueError(f"text vocab must hold the {TEXT_VOCAB} byte and control tokens")

    @property
    def num_layers(self) -> int:
        return len(self.audio_vocab)

    @property
    def delay_config(self) -> DelayConfig:
        return DelayConfig(self.delays)

    @property
    def decoder_context(self) -> int:
        return self.g + max(self.delays)

    @property
    def dec_dim(self) -> int:
        # the decoder reads the same embedding tables as the encoder
        return self.enc_dim


@dataclass(frozen=True)
class StageWeights:
    text: float
    rvq: tuple[float, ...]
    modality: float  # weight on the <PATCH> prediction that precedes every patch

    @classmethod
    def preset(cls, stage: str, num_layers: int = 8) -> "StageWeights":
        if stage == "understanding":
            return cls(UNDERSTANDING_TEXT_WEIGHT, UNDERSTANDING_RVQ_WEIGHTS[:num_layers], 0.0)
        if stage == "joint":
            return cls(JOINT_TEXT_WEIGHT, JOINT_RVQ_WEIGHTS[:num_layers], JOINT_TEXT_WEIGHT)
        raise ValueError(f"unknown stage {stage!r} (expected 'understanding' or 'joint')")

    def describe(self) -> str:
        return "-".join(f"{w:g}" for w in (self.text, *self.rvq))


# per-stage learning rates; toy runs multiply them by ``lr_scale``
STAGE_LRS = {
    "understanding": {"encoder": 2e-4, "backbone": 3e-5, "decoder": 0.0, "schedule": "constant"},
    "joint": {"encoder": 2e-4, "backbone": 3e-5, "decoder": 2e-4, "schedule": "cosine"},
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "joint"
    steps: int = 2000
    batch_size: int = 32
    lr_scale: float = 10.0
    warmup_ratio: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    frame_rate: float = 25.0


def _parse(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        items = [v for v in value.replace(",", "-").split("-") if v.strip()]
        kind = type(like[0]) if like else int
        return tuple(kind(float(v)) if kind is int else kind(v) for v in items)
    return value.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return "-".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
    return str(value)


def _section(obj, section: configparser.SectionProxy):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"[{section.name}] unknown key {key!r}")
        updates[key] = _parse(raw, known[key])
    return replace(obj, **updates)


def load_config(path: Optional[Union[str, Path]] = None, text: Optional[str] = None) -> RunConfig:
    """Read an INI-style config with ``[model]``, ``[train]`` and ``[audio]`` sections.

    Lists are written dash-separated, mirroring the training tables (``12-8-6-4``).
    """
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    elif text is not None:
        cp.read_string(text)
    cfg = RunConfig()
    for name in cp.sections():
        if name not in ("model", "train", "audio"):
            raise ValueError(f"unknown config section [{name}]")
    model = _section(cfg.model, cp["model"]) if cp.has_section("model") else cfg.model
    train = _section(cfg.train, cp["train"]) if cp.has_section("train") else cfg.train
    frame_rate = cp.getfloat("audio", "frame_rate", fallback=cfg.frame_rate)
    return RunConfig(model, train, frame_rate)


def dump_config(cfg: RunConfig) -> str:
    lines = ["[model]"]
    lines += [f"{k} = {_format(v)}" for k, v in asdict(cfg.model).items()]
    lines += ["", "[train]"]
    lines += [f"{k} = {_format(v)}" for k, v in asdict(cfg.train).items()]
    lines += ["", "[audio]", f"frame_rate = {cfg.frame_rate:g}", ""]
    return "\n".join(lines)
