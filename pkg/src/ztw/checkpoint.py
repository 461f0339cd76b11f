"""ZTWCKPT1 checkpoint files.

Layout, all integers little-endian u32:

    magic "ZTWCKPT1" (8 bytes)
    tensor_count
    per tensor: name_length, UTF-8 name, rank, extents..., then
                float64 little-endian row-major values

The format carries tensors only; the architecture needed to rebuild a
model travels in the resolved config written next to the checkpoint.
"""

from __future__ import annotations

import struct

import numpy as np

from .exceptions import DataFormatError

MAGIC = b"ZTWCKPT1"


def save_checkpoint(path: str, entries: list):
    """entries: ordered (name, array) pairs; order is preserved on load."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            arr = np.asarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            for e in arr.shape:
                f.write(struct.pack("<I", e))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> dict:
    """Returns an insertion-ordered name -> float64 array mapping."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise DataFormatError(
            f"{path}: bad magic {data[:8]!r} at byte 0 (expected {MAGIC!r})")
    pos = 8

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError(f"{path}: truncated at byte {len(data)} reading {what}")
        out = data[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(rank))
        n_vals = 1
        for e in shape:
            n_vals *= e
        raw = take(8 * n_vals, f"values of {name}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise DataFormatError(f"{path}: {len(data) - pos} trailing bytes at byte {pos}")
    return out


def assign_entries(entries: list, loaded: dict, path: str = "<checkpoint>"):
    """Copy loaded arrays into the tensors of (name, tensor) pairs, by name."""
    for name, tensor in entries:
        if name not in loaded:
            raise DataFormatError(f"{path}: missing tensor {name!r}")
        arr = loaded[name]
        if arr.shape != tensor.data.shape:
            raise DataFormatError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr.copy()
