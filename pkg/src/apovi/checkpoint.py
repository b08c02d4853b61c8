"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"APVC"  u16 version  u16 len(model_id)  model_id utf-8  u32 n_tensors
    n_tensors x [u16 len(name)  name utf-8  u8 ndim  ndim x u64 dim]
    float64 little-endian payload, tensors concatenated in table order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointShapeError, CheckpointVersionError, TruncationError

MAGIC = b"APVC"
VERSION = 1


def save_checkpoint(params: dict, path, model_id: str = "model") -> None:
    """Write ``{name: Tensor | ndarray}`` to ``path``."""
    arrays = {k: np.asarray(getattr(v, "data", v), dtype=np.float64) for k, v in params.items()}
    mid = model_id.encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<HH", VERSION, len(mid)) + mid
    out += struct.pack("<I", len(arrays))
    for name, a in arrays.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
        out += struct.pack(f"<{a.ndim}Q", *a.shape)
    for a in arrays.values():
        out += a.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(
                f"checkpoint truncated while reading {what}: need {self.pos + n} bytes, file has {len(self.buf)}"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, expected: dict | None = None) -> tuple[str, dict]:
    """Read a checkpoint; returns ``(model_id, {name: ndarray})``.

    With ``expected`` (name to Tensor/array/shape) every stored tensor must be
    present with the same shape, otherwise ``CheckpointShapeError`` names it.
    """
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointVersionError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this reader supports {VERSION}")
    (mlen,) = r.unpack("<H", "model id length")
    model_id = r.take(mlen, "model id").decode("utf-8", errors="replace")
    (count,) = r.unpack("<I", "tensor count")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        table.append((name, shape))
    sizes = [int(np.prod(s, dtype=np.uint64)) if s else 1 for _, s in table]
    need = 8 * sum(sizes)
    have = len(r.buf) - r.pos
    if have < need:
        raise TruncationError(f"checkpoint payload truncated: expected {need} bytes, found {have}")
    if have > need:
        raise CheckpointShapeError(f"shape table accounts for {need} payload bytes but {have} follow")
    out = {}
    for (name, shape), n in zip(table, sizes):
        out[name] = np.frombuffer(r.take(8 * n, name), dtype="<f8").astype(np.float64).reshape(shape)
    if expected is not None:
        _check_against(out, expected)
    return model_id, out


def _check_against(loaded: dict, expected: dict) -> None:
    for name, ref in expected.items():
        shape = tuple(ref) if isinstance(ref, tuple) else np.shape(getattr(ref, "data", ref))
        if name not in loaded:
            raise CheckpointShapeError(f"tensor {name!r} missing from checkpoint")
        if loaded[name].shape != shape:
            raise CheckpointShapeError(f"tensor {name!r} has shape {loaded[name].shape}, model expects {shape}")
    extra = sorted(set(loaded) - set(expected))
    if extra:
        raise CheckpointShapeError(f"checkpoint holds tensors the model lacks: {extra}")


def restore(params: dict, path) -> str:
    """Load ``path`` into the Tensors of ``params`` in place; returns the model id."""
    model_id, arrays = load_checkpoint(path, expected=params)
    for name, t in params.items():
        t.data = arrays[name].copy()
    return model_id
