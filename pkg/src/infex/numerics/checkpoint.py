"""Shared checkpoint format.

Little-endian: magic ``IEXP``, version u32, then blocks until end of file,
each block ``name_len u16, name bytes, rank u8, dims u32 * rank, f32 data``.
"""

import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, FormatError

MAGIC = b"IEXP"
VERSION = 1


def save_arrays(path, arrays):
    """Write an ordered mapping ``name -> array`` (stored as float32)."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_arrays(path):
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0, path=path)
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header", offset=len(buf), path=path)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)
    out = {}
    pos = 8
    try:
        while pos < len(buf):
            start = pos
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise FormatError(f"truncated block '{name}'", offset=start, path=path)
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint ({exc})", offset=pos, path=path) from exc
    return out


def state_dict(params, prefix=""):
    return {prefix + name: p.value for name, p in params}


def load_state_dict(params, arrays, prefix=""):
    for name, p in params:
        key = prefix + name
        if key not in arrays:
            raise ConfigurationError(f"checkpoint is missing parameter '{key}'")
        if arrays[key].shape != p.value.shape:
            raise ConfigurationError(
                f"parameter '{key}': checkpoint shape {arrays[key].shape} vs model {p.value.shape}"
            )
        p.value[...] = arrays[key]
