"""Binary checkpoint format.

Layout (all integers unsigned 64-bit little-endian)::

    b"CNNAV1\\0"
    count
    count x { name_len, name (UTF-8), rank, dims[rank], float32 LE data }
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

MAGIC = b"CNNAV1\0"

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint", "dumps", "loads"]


class CheckpointError(ValueError):
    """Malformed checkpoint bytes, or a checkpoint that does not fit a model."""


def dumps(state: Dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<Q", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<Q", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<{1 + arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def loads(buf: bytes) -> Dict[str, np.ndarray]:
    if not buf.startswith(MAGIC):
        raise CheckpointError("bad magic; not a CNNAV1 checkpoint")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    state: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        state[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last record")
    return state


def save_checkpoint(path: Union[str, Path], state: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
