"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"CSCAE1"
    u32  tensor count
    per tensor: u16 name length, name (utf-8), u8 rank, rank * u32 dims, f32 payload

Model parameters and buffers (batch-norm statistics, the running detection
threshold) are stored under their module paths; optimizer and trainer state
under the ``optim.`` and ``train.`` prefixes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .layers import Module

MAGIC = b"CSCAE1"
EXTRA_PREFIXES = ("optim.", "train.")


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large for the format")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    return out


def save_checkpoint(path, model: Module, extras: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(model.state_dict())
    for k, v in (extras or {}).items():
        if not k.startswith(EXTRA_PREFIXES):
            raise CheckpointError(f"extra tensor {k!r} must use one of the prefixes {EXTRA_PREFIXES}")
        tensors[k] = v
    save_tensors(path, tensors)


def load_checkpoint(path, model: Module) -> dict[str, np.ndarray]:
    """Restore ``model`` in place; returns the non-model (extra) tensors.

    Raises :class:`CheckpointError` when names or shapes do not match.
    """
    tensors = load_tensors(path)
    state = {k: v for k, v in tensors.items() if not k.startswith(EXTRA_PREFIXES)}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    return {k: v for k, v in tensors.items() if k.startswith(EXTRA_PREFIXES)}
