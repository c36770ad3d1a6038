"""Binary token files.

Layout (little-endian)::

    "MIMT"            4 bytes magic
    version           u8   (= 1)
    frame_rate_num    u16
    frame_rate_den    u16
    R'                u8   codebooks per frame
    G                 u8   patch size
    codebook sizes    R' x u16
    M                 u32  frames
    indices           M x R' u16, row-major; EMPTY is 0xFFFF
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .framing import DEFAULT_G, EMPTY

MAGIC = b"MIMT"
VERSION = 1
EMPTY_U16 = 0xFFFF
_HEADER = struct.Struct("<4sBHHBB")


class TokenFileError(ValueError):
    pass


@dataclass
class TokenFile:
    indices: np.ndarray  # M x R', EMPTY = -1
    codebook_sizes: tuple[int, ...]
    frame_rate: Fraction = Fraction(25, 1)
    g: int = DEFAULT_G

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, len(self.codebook_sizes))
        self.codebook_sizes = tuple(int(k) for k in self.codebook_sizes)
        self.frame_rate = Fraction(self.frame_rate)
        validate_indices(self.indices, self.codebook_sizes)

    @property
    def num_frames(self) -> int:
        return self.indices.shape[0]


def validate_indices(a: np.ndarray, sizes: Sequence[int]) -> None:
    ok = (a == EMPTY) | ((a >= 0) & (a < np.asarray(sizes, dtype=np.int64)[None, :]))
    if not ok.all():
        raise TokenFileError("index out of range")


def to_bytes(tf: TokenFile) -> bytes:
    r = len(tf.codebook_sizes)
    if r > 255 or tf.g > 255:
        raise TokenFileError("R' and G must fit in a byte")
    if any(k >= EMPTY_U16 for k in tf.codebook_sizes):
        raise TokenFileError("codebook size must be < 65535")
    num, den = tf.frame_rate.numerator, tf.frame_rate.denominator
    head = _HEADER.pack(MAGIC, VERSION, num, den, r, tf.g)
    sizes = struct.pack(f"<{r}H", *tf.codebook_sizes)
    count = struct.pack("<I", tf.num_frames)
    body = np.where(tf.indices == EMPTY, EMPTY_U16, tf.indices).astype("<u2").tobytes()
    return head + sizes + count + body


def from_bytes(buf: bytes) -> TokenFile:
    if len(buf) < _HEADER.size or buf[:4] != MAGIC:
        raise TokenFileError("bad magic: not a MIMT token file")
    _, version, num, den, r, g = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise TokenFileError(f"unsupported token file version {version}")
    if den == 0:
        raise TokenFileError("zero frame-rate denominator")
    off = _HEADER.size
    try:
        sizes = struct.unpack_from(f"<{r}H", buf, off)
        off += 2 * r
        (m,) = struct.unpack_from("<I", buf, off)
        off += 4
    except struct.error as exc:
        raise TokenFileError("truncated token file") from exc
    expected = off + 2 * m * r
    if len(buf) != expected:
        raise TokenFileError(f"token file size {len(buf)} != expected {expected}")
    raw = np.frombuffer(buf, dtype="<u2", count=m * r, offset=off).astype(np.int64).reshape(m, r)
    raw[raw == EMPTY_U16] = EMPTY
    return TokenFile(raw, sizes, Fraction(num, den), g)


def write_tokens(path: Union[str, Path], tf: TokenFile) -> None:
    Path(path).write_bytes(to_bytes(tf))


def read_tokens(path: Union[str, Path]) -> TokenFile:
    return from_bytes(Path(path).read_bytes())
