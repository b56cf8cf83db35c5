"""Flat parameter vector with named, shaped slices, plus its checkpoint format.

Checkpoint layout (little-endian)::

    b"DINR"  u32 version  u32 n_slices
    n_slices x (u32 name_len, name bytes, u64 offset, u64 length)
    u64 total_length, total_length x f64
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DINR"
VERSION = 1


class FieldParams:
    """All learnable parameters in one contiguous float vector.

    Indexing by a slice name returns a reshaped *view* into the vector, so
    in-place updates through either handle are shared.
    """

    def __init__(self, shapes: dict[str, tuple[int, ...]], vector=None, dtype=np.float64):
        self.shapes = dict(shapes)
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape, dtype=np.int64))
            self.offsets[name] = (pos, size)
            pos += size
        if vector is None:
            vector = np.zeros(pos, dtype=dtype)
        vector = np.asarray(vector)
        if vector.shape != (pos,):
            raise ValueError(f"vector has {vector.shape}, layout needs ({pos},)")
        self.vector = vector

    def __len__(self):
        return self.vector.size

    def __getitem__(self, name: str) -> np.ndarray:
        off, size = self.offsets[name]
        return self.vector[off : off + size].reshape(self.shapes[name])

    def __setitem__(self, name: str, value) -> None:
        off, size = self.offsets[name]
        self.vector[off : off + size] = np.reshape(value, -1)

    def __contains__(self, name):
        return name in self.offsets

    def names(self):
        return list(self.shapes)

    def group(self, prefix: str) -> np.ndarray:
        """Contiguous flat view of every slice whose name starts with ``prefix.``."""
        spans = [self.offsets[n] for n in self.shapes if n.split(".")[0] == prefix]
        if not spans:
            raise KeyError(prefix)
        start = spans[0][0]
        end = spans[-1][0] + spans[-1][1]
        return self.vector[start:end]

    def groups(self) -> list[str]:
        seen = []
        for n in self.shapes:
            g = n.split(".")[0]
            if g not in seen:
                seen.append(g)
        return seen

    def zeros_like(self) -> "FieldParams":
        return FieldParams(self.shapes, np.zeros_like(self.vector))

    def copy(self) -> "FieldParams":
        return FieldParams(self.shapes, self.vector.copy())

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.shapes, self.vector.astype(dtype))


def save_checkpoint(path, params: FieldParams) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params.offsets))]
    for name, (off, size) in params.offsets.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<QQ", off, size))
    vec = np.ascontiguousarray(params.vector, dtype="<f8")
    parts.append(struct.pack("<Q", vec.size))
    parts.append(vec.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, shapes: dict[str, tuple[int, ...]] | None = None) -> FieldParams:
    """Read a checkpoint; ``shapes`` restores slice shapes (flat 1-D otherwise)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    table = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        off, size = struct.unpack_from("<QQ", data, pos)
        pos += 16
        table[name] = (off, size)
    (total,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    vec = np.frombuffer(data, dtype="<f8", count=total, offset=pos).astype(np.float64)
    if shapes is None:
        shapes = {name: (size,) for name, (_, size) in table.items()}
    params = FieldParams(shapes, vec)
    if params.offsets != table:
        raise ValueError(f"{path}: slice table does not match the expected layout")
    return params
