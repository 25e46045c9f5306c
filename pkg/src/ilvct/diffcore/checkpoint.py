"""Checkpoint I/O: "ILVC" magic followed by ordered (name, shape, f32) records."""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"ILVC"


class CheckpointError(ValueError):
    """Raised on malformed checkpoints or model/checkpoint mismatches."""


def save_checkpoint(params, path):
    """Write parameters in declaration order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.values.ndim))
            fh.write(struct.pack(f"<{p.values.ndim}I", *p.values.shape))
            fh.write(p.values.astype("<f4").tobytes())


def load_checkpoint(params, path):
    """Load values into ``params`` in order, rejecting name/shape mismatches."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        (count,) = struct.unpack("<I", fh.read(4))
        if count != len(params):
            raise CheckpointError(
                f"checkpoint has {count} parameters, model expects {len(params)}"
            )
        for p in params:
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            if name != p.name:
                raise CheckpointError(f"parameter name mismatch: {name} != {p.name}")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            if shape != p.values.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {shape} != {p.values.shape}"
                )
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise CheckpointError(f"truncated payload for {name}")
            p.tensor.values[...] = np.frombuffer(buf, dtype="<f4").reshape(shape)
