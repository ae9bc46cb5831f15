"""Binary message format for collectives.

A message is a 13-byte little-endian header (u32 tag, u8 dtype code, u64
element count) followed by the packed elements. fp16 elements are raw
2-byte binary16 patterns. On a stream, each message is framed by an 8-byte
little-endian length.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Precision

__all__ = ["WireMessage", "WireError", "pack_frame", "read_frame", "HEADER", "FRAME_LEN"]

HEADER = struct.Struct("<IBQ")
FRAME_LEN = struct.Struct("<Q")

_LE = {Precision.FP16: "<f2", Precision.FP32: "<f4", Precision.FP64: "<f8"}


class WireError(ValueError):
    pass


@dataclass
class WireMessage:
    tag: int
    dtype: Precision
    data: np.ndarray  # 1-D, dtype matching ``dtype``

    def __post_init__(self):
        if not 0 <= self.tag < 2**32:
            raise WireError(f"tag out of range: {self.tag}")
        self.data = np.ascontiguousarray(self.data, dtype=self.dtype.dtype).reshape(-1)

    @property
    def count(self) -> int:
        return self.data.size

    @property
    def payload_nbytes(self) -> int:
        return self.count * self.dtype.nbytes

    def to_bytes(self) -> bytes:
        header = HEADER.pack(self.tag, self.dtype.code, self.count)
        return header + self.data.astype(_LE[self.dtype], copy=False).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WireMessage":
        if len(buf) < HEADER.size:
            raise WireError(f"short message: {len(buf)} bytes")
        tag, code, count = HEADER.unpack_from(buf)
        try:
            dtype = Precision.from_code(code)
        except ValueError as e:
            raise WireError(str(e)) from None
        expected = HEADER.size + count * dtype.nbytes
        if len(buf) != expected:
            raise WireError(f"payload length {len(buf) - HEADER.size} != {count} x {dtype.nbytes}")
        data = np.frombuffer(buf, dtype=_LE[dtype], count=count, offset=HEADER.size)
        return cls(tag, dtype, data.astype(dtype.dtype))

    def same_bits(self, other: "WireMessage") -> bool:
        return (self.tag == other.tag and self.dtype == other.dtype
                and self.data.tobytes() == other.data.tobytes())


def pack_frame(body: bytes) -> bytes:
    return FRAME_LEN.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise EOFError("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    (length,) = FRAME_LEN.unpack(_recv_exact(sock, FRAME_LEN.size))
    return _recv_exact(sock, length)
