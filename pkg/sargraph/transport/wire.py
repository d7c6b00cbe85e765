"""
Length-prefixed binary framing for worker-to-worker messages.

Frame: 16-byte header (b"SARW", u8 kind, u8 src, u8 dst, u8 dtype,
u32 layer, u32 seq), u64 payload length, payload. The payload is a u64 rows,
u64 cols header followed by row-major little-endian values. Everything is
little-endian. Byte accounting counts only the values, not either header.
"""
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Tuple
import socket
import struct

import numpy as np

from ..core.errors import ProtocolError, TransportAbort

MAGIC = b"SARW"
_HEADER = struct.Struct("<4sBBBBII")
_LENGTH = struct.Struct("<Q")
_SHAPE = struct.Struct("<QQ")
HEADER_LEN = _HEADER.size + _LENGTH.size
MAX_PAYLOAD = 1 << 34


class MessageKind(IntEnum):
    FETCH_REQUEST = 1
    FEATURE_CHUNK = 2
    GRAD_CHUNK = 3
    ALLREDUCE_CHUNK = 4
    BARRIER = 5
    ABORT = 6


class WireDType(IntEnum):
    F32 = 0
    F64 = 1
    I64 = 2
    U8 = 3


_NUMPY_DTYPES = {
    WireDType.F32: np.dtype("<f4"),
    WireDType.F64: np.dtype("<f8"),
    WireDType.I64: np.dtype("<i8"),
    WireDType.U8: np.dtype("u1"),
}

_KIND_DTYPES = {
    MessageKind.FETCH_REQUEST: {WireDType.I64},
    MessageKind.FEATURE_CHUNK: {WireDType.F32, WireDType.F64},
    MessageKind.GRAD_CHUNK: {WireDType.F32, WireDType.F64},
    MessageKind.ALLREDUCE_CHUNK: {WireDType.F32, WireDType.F64},
    MessageKind.BARRIER: {WireDType.U8},
    MessageKind.ABORT: {WireDType.U8},
}


def wire_dtype(dtype: np.dtype) -> WireDType:
    dtype = np.dtype(dtype)
    for code, candidate in _NUMPY_DTYPES.items():
        if candidate.kind == dtype.kind and candidate.itemsize == dtype.itemsize:
            return code
    raise ProtocolError(f"dtype {dtype} cannot be sent on the wire")


@dataclass
class WireMessage:
    kind: MessageKind
    layer: int
    src: int
    dst: int
    payload: np.ndarray
    seq: int = 0

    @property
    def payload_bytes(self) -> int:
        return int(self.payload.nbytes)

    @classmethod
    def text(cls, kind: MessageKind, layer: int, src: int, dst: int, message: str = "", seq: int = 0) -> "WireMessage":
        data = np.frombuffer(message.encode('utf-8'), dtype=np.uint8).reshape(-1, 1)
        return cls(kind, layer, src, dst, data, seq)

    def as_text(self) -> str:
        return self.payload.astype(np.uint8).tobytes().decode('utf-8', errors='replace')


def encode_message(msg: WireMessage) -> bytes:
    payload = np.asarray(msg.payload)
    if payload.ndim != 2:
        raise ProtocolError("payload must be 2-D")
    code = wire_dtype(payload.dtype)
    if code not in _KIND_DTYPES[MessageKind(msg.kind)]:
        raise ProtocolError(f"{MessageKind(msg.kind).name} cannot carry {payload.dtype}")
    if not (0 <= msg.src < 256 and 0 <= msg.dst < 256):
        raise ProtocolError("worker ids must fit in one byte")
    body = _SHAPE.pack(payload.shape[0], payload.shape[1]) + \
        np.ascontiguousarray(payload, dtype=_NUMPY_DTYPES[code]).tobytes()
    header = _HEADER.pack(MAGIC, int(msg.kind), msg.src, msg.dst, int(code), msg.layer, msg.seq)
    return header + _LENGTH.pack(len(body)) + body


def decode_header(blob: bytes) -> Tuple[MessageKind, int, int, WireDType, int, int, int]:
    if len(blob) < HEADER_LEN:
        raise ProtocolError("frame shorter than its header")
    magic, kind, src, dst, code, layer, seq = _HEADER.unpack_from(blob, 0)
    (length,) = _LENGTH.unpack_from(blob, _HEADER.size)
    if magic != MAGIC:
        raise ProtocolError("invalid frame magic")
    try:
        kind = MessageKind(kind)
        code = WireDType(code)
    except ValueError as e:
        raise ProtocolError(f"unknown kind/dtype in header: {e}") from e
    if code not in _KIND_DTYPES[kind]:
        raise ProtocolError(f"{kind.name} cannot carry dtype {code.name}")
    if length < _SHAPE.size or length > MAX_PAYLOAD:
        raise ProtocolError(f"invalid payload length {length}")
    return kind, src, dst, code, layer, seq, length


def decode_body(kind: MessageKind, src: int, dst: int, code: WireDType, layer: int, seq: int,
                body: bytes) -> WireMessage:
    rows, cols = _SHAPE.unpack_from(body, 0)
    dtype = _NUMPY_DTYPES[code]
    values = body[_SHAPE.size:]
    if len(values) != rows * cols * dtype.itemsize:
        raise ProtocolError(f"payload holds {len(values)} bytes, header declares {rows}x{cols} {dtype}")
    if kind is MessageKind.FETCH_REQUEST and cols != 1 and rows:
        raise ProtocolError("fetch requests carry a single column of node ids")
    payload = np.frombuffer(values, dtype=dtype).reshape(rows, cols).astype(dtype.newbyteorder('='))
    return WireMessage(kind, layer, src, dst, payload, seq)


def decode_message(blob: bytes) -> WireMessage:
    kind, src, dst, code, layer, seq, length = decode_header(blob)
    body = blob[HEADER_LEN:]
    if len(body) != length:
        raise ProtocolError(f"frame body is {len(body)} bytes, header declares {length}")
    return decode_body(kind, src, dst, code, layer, seq, body)


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    remaining = size
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise TransportAbort("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> Optional[WireMessage]:
    """Read one frame; None on a clean close between frames"""
    first = sock.recv(1)
    if not first:
        return None
    head = first + _recv_exact(sock, HEADER_LEN - 1)
    kind, src, dst, code, layer, seq, length = decode_header(head)
    return decode_body(kind, src, dst, code, layer, seq, _recv_exact(sock, length))
