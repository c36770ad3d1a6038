"""Parameter checkpoints.

Layout (little-endian)::

    "MIMP"  magic
    u32     record count
    per record:
        u16 name length, UTF-8 name
        u8  ndim, ndim x u32 shape
        prod(shape) x float32 values, row-major
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np
import torch

MAGIC = b"MIMP"


class CheckpointError(ValueError):
    pass


def params_to_bytes(params: Mapping[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> "OrderedDict[str, torch.Tensor]":
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a MIMP checkpoint")
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
        off = 8
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(buf):
                raise CheckpointError("truncated checkpoint")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            if name in out:
                raise CheckpointError(f"duplicate parameter name {name!r}")
            out[name] = torch.from_numpy(arr.copy())
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError("truncated or corrupt checkpoint") from exc
    if off != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def save_params(path: Union[str, Path], params: Mapping[str, torch.Tensor]) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: Union[str, Path]) -> "OrderedDict[str, torch.Tensor]":
    return params_from_bytes(Path(path).read_bytes())


def load_into(module: torch.nn.Module, params: Mapping[str, torch.Tensor]) -> None:
    own = dict(module.named_parameters())
    missing = set(own) - set(params)
    extra = set(params) - set(own)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(params[name].shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: shape {tuple(params[name].shape)} != {tuple(p.shape)}")
            p.copy_(params[name].to(p.dtype))
