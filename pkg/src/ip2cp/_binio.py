"""Little-endian binary helpers for the model file formats.

Both model formats are sequences of u32 integers and float32 tensors. A
tensor is stored as `ndim:u32, dims:u32*ndim, data:f32*prod(dims)` in
row-major order; round trips are bit-exact for float32 payloads.
"""

from __future__ import annotations

import numpy as np

from .errors import ModelFileError


class Reader:
    """Cursor over a byte string with typed reads and truncation diagnostics."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, item: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFileError(
                f"truncated {self.what}: expected {self.pos + n} bytes through "
                f"{item}, got {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, item: str) -> int:
        return int(np.frombuffer(self.take(4, item), dtype="<u4")[0])

    def f32(self, count: int, item: str) -> np.ndarray:
        raw = self.take(4 * count, item)
        return np.frombuffer(raw, dtype="<f4").copy()

    def tensor(self, item: str) -> np.ndarray:
        ndim = self.u32(f"{item} ndim")
        if ndim > 8:
            raise ModelFileError(f"{self.what}: implausible tensor rank {ndim} for {item}")
        dims = tuple(self.u32(f"{item} dim {i}") for i in range(ndim))
        count = 1
        for d in dims:
            count *= d
        return self.f32(count, f"{item} data").reshape(dims)

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise ModelFileError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes after payload"
            )


def u32_bytes(value: int) -> bytes:
    return np.asarray([value], dtype="<u4").tobytes()


def tensor_bytes(arr: np.ndarray) -> bytes:
    parts = [u32_bytes(arr.ndim)]
    parts.extend(u32_bytes(d) for d in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)
