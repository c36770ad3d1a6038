import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mimoaudio import tokenfile
from mimoaudio.framing import EMPTY

SIZES = (1024, 1024, 128, 128, 128, 128, 128, 128)


def hand_encoded(a, sizes, g=4):
    """Byte layout written out field by field."""
    out = b"MIMT" + bytes([1]) + struct.pack("<HH", 25, 1) + bytes([len(sizes), g])
    out += b"".join(struct.pack("<H", k) for k in sizes)
    out += struct.pack("<I", a.shape[0])
    for row in a:
        for v in row:
            out += struct.pack("<H", 0xFFFF if v == EMPTY else int(v))
    return out


def test_layout_matches_hand_encoding(rng):
    a = np.stack([rng.integers(k, size=6) for k in SIZES], axis=1)
    a[5, 4:] = EMPTY
    raw = tokenfile.to_bytes(tokenfile.TokenFile(a, SIZES))
    assert raw == hand_encoded(a, SIZES)
    assert len(raw) == 4 + 1 + 4 + 2 + 2 * 8 + 4 + 2 * 6 * 8


def test_file_round_trip_byte_identical(tmp_path, rng):
    a = np.stack([rng.integers(k, size=30) for k in SIZES], axis=1)
    p1, p2 = tmp_path / "a.mimt", tmp_path / "b.mimt"
    tokenfile.write_tokens(p1, tokenfile.TokenFile(a, SIZES))
    back = tokenfile.read_tokens(p1)
    tokenfile.write_tokens(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(back.indices, a)
    assert back.frame_rate == Fraction(25) and back.g == 4 and back.codebook_sizes == SIZES


@given(st.integers(0, 50), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_round_trip_property(m, r, seed):
    rng = np.random.default_rng(seed)
    sizes = tuple(int(k) for k in rng.integers(2, 2000, size=r))
    a = np.stack([rng.integers(k, size=m) for k in sizes], axis=1) if m else np.zeros((0, r), dtype=int)
    if m:
        a[rng.random((m, r)) < 0.1] = EMPTY
    raw = tokenfile.to_bytes(tokenfile.TokenFile(a, sizes))
    back = tokenfile.from_bytes(raw)
    assert np.array_equal(back.indices, a)
    assert tokenfile.to_bytes(back) == raw


def test_bad_magic():
    raw = tokenfile.to_bytes(tokenfile.TokenFile(np.zeros((2, 8), dtype=int), SIZES))
    with pytest.raises(tokenfile.TokenFileError, match="bad magic"):
        tokenfile.from_bytes(b"MIMX" + raw[4:])
    with pytest.raises(tokenfile.TokenFileError, match="bad magic"):
        tokenfile.from_bytes(b"")


def test_out_of_range_rejected():
    raw = bytearray(tokenfile.to_bytes(tokenfile.TokenFile(np.zeros((2, 8), dtype=int), SIZES)))
    raw[-2:] = struct.pack("<H", 128)
    with pytest.raises(tokenfile.TokenFileError, match="index out of range"):
        tokenfile.from_bytes(bytes(raw))
    with pytest.raises(tokenfile.TokenFileError, match="index out of range"):
        tokenfile.TokenFile(np.full((1, 8), 1024), SIZES)


def test_truncation_and_version():
    raw = tokenfile.to_bytes(tokenfile.TokenFile(np.zeros((2, 8), dtype=int), SIZES))
    with pytest.raises(tokenfile.TokenFileError):
        tokenfile.from_bytes(raw[:-1])
    with pytest.raises(tokenfile.TokenFileError):
        tokenfile.from_bytes(raw + b"\x00\x00")
    with pytest.raises(tokenfile.TokenFileError, match="version"):
        tokenfile.from_bytes(raw[:4] + bytes([2]) + raw[5:])
