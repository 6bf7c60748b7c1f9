"""Weight bundles: initialization and the ``EVOW`` binary container.

Layout (little-endian): magic ``EVOW``, version u32, count u32, then per tensor
id length u16, utf-8 id, rank u8, rank x u32 dims, float32 data.
"""

from __future__ import annotations

import contextlib
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"EVOW"
VERSION = 1

WeightBundle = dict[str, np.ndarray]


class WeightFormatError(ValueError):
    pass


def he_initialize(shape: tuple[int, ...], init_scale: float, rng: np.random.Generator,
                  fan_in: int | None = None) -> np.ndarray:
    """Gaussian with variance ``2 * init_scale**2 / fan_in``.

    ``fan_in`` defaults to the product of all but the last dimension.
    """
    if init_scale <= 0:
        raise ValueError("init_scale must be positive")
    if fan_in is None:
        fan_in = math.prod(shape[:-1]) if len(shape) > 1 else 1
    std = math.sqrt(2.0 * init_scale ** 2 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


def encode(bundle: WeightBundle) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(bundle))]
    for name in sorted(bundle):
        arr = np.asarray(bundle[name], dtype="<f4")  # keeps rank 0; tobytes() is C order
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)))
        parts.append(key)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes) -> WeightBundle:
    if data[:4] != MAGIC:
        raise WeightFormatError("bad magic")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise WeightFormatError(f"unsupported version {version}")
        off = 12
        out: WeightBundle = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + klen].decode("utf-8")
            off += klen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            nbytes = 4 * math.prod(dims)
            if off + nbytes > len(data):
                raise WeightFormatError("truncated tensor data")
            out[name] = np.frombuffer(data, dtype="<f4", count=math.prod(dims), offset=off) \
                .reshape(dims).astype(np.float32)
            off += nbytes
    except struct.error as exc:
        raise WeightFormatError(f"truncated container: {exc}") from exc
    if off != len(data):
        raise WeightFormatError("trailing bytes after last tensor")
    return out


def save(bundle: WeightBundle, path: str | os.PathLike) -> None:
    """Write-then-rename so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".weights-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(encode(bundle))
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> WeightBundle:
    return decode(Path(path).read_bytes())

