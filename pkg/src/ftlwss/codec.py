"""Low-level binary encoding shared by checkpoints and federation messages.

Tensor sections are self-describing: a u32 rank, the u32 dimensions, then the
row-major float32 payload. All integers and floats are little-endian. Decoding
failures raise :class:`DecodeError` carrying the byte offset of the problem,
and never leave partially constructed state behind.
"""

from __future__ import annotations

import struct

import numpy as np


class DecodeError(ValueError):
    """Malformed or truncated binary payload."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


class ByteReader:
    """Sequential reader tracking its offset for error reporting."""

    def __init__(self, data: bytes):
        self._data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self._data):
            raise DecodeError(
                f"truncated payload: wanted {count} bytes, {len(self._data) - self.offset} left",
                self.offset,
            )
        chunk = self._data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        rank = self.u32()
        if rank > 8:
            raise DecodeError(f"implausible tensor rank {rank}", self.offset - 4)
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    def expect_end(self) -> None:
        if self.offset != len(self._data):
            raise DecodeError(
                f"{len(self._data) - self.offset} trailing bytes after message", self.offset
            )

    @property
    def remaining(self) -> int:
        return len(self._data) - self.offset
