"""Message buffers and the 16-byte packet header codec.

A msgbuf with capacity ``D`` and per-packet payload ``mtu`` is backed by a
single ``bytearray`` of ``16 * N + D`` bytes, ``N = ceil(D / mtu)``::

    [hdr 0][data 0 .. D-1][hdr 1][hdr 2] ... [hdr N-1]

so the first packet (header + data) is one contiguous range and the
application data region never moves.
"""

from __future__ import annotations

import enum
import struct
from typing import NamedTuple

HDR_SIZE = 16
MAX_MSG_SIZE = 8 * 1024 * 1024
DEFAULT_MTU_DATA = 1408
WIRE_VERSION = 1
MAX_PKTS_PER_MSG = 0xFFFF

FLAG_ERROR = 0x1

_HDR = struct.Struct("<BBHHHII")


class CodecError(ValueError):
    pass


class MsgBufSizeError(ValueError):
    pass


class OwnershipError(RuntimeError):
    """Application touched a msgbuf that the RPC layer currently owns."""


class PktType(enum.IntEnum):
    REQ_DATA = 0
    RESP_DATA = 1
    CREDIT_RETURN = 2
    REQ_FOR_RESP = 3


class PacketHeader(NamedTuple):
    version: int = WIRE_VERSION
    pkt_type: PktType = PktType.REQ_DATA
    req_type: int = 0
    session_num: int = 0
    pkt_num: int = 0
    flags: int = 0
    req_num: int = 0
    msg_size: int = 0


def pack_header(h: PacketHeader) -> bytes:
    buf = bytearray(HDR_SIZE)
    pack_header_into(h, buf, 0)
    return bytes(buf)


def pack_header_into(h: PacketHeader, buf, offset: int) -> None:
    if not 0 <= h.version <= 0xF:
        raise CodecError(f"version {h.version} does not fit in 4 bits")
    if h.pkt_type not in _PKT_TYPES:
        raise CodecError(f"unknown pkt_type {h.pkt_type!r}")
    if h.msg_size > MAX_MSG_SIZE:
        raise CodecError(f"msg_size {h.msg_size} exceeds {MAX_MSG_SIZE}")
    try:
        _HDR.pack_into(
            buf, offset,
            h.version | (int(h.pkt_type) << 4),
            h.req_type, h.session_num, h.pkt_num, h.flags,
            h.req_num, h.msg_size,
        )
    except struct.error as exc:
        raise CodecError(str(exc)) from exc


def unpack_header(b) -> PacketHeader:
    if len(b) != HDR_SIZE:
        raise CodecError(f"header must be {HDR_SIZE} bytes, got {len(b)}")
    return unpack_header_from(b)


def unpack_header_from(b, offset: int = 0) -> PacketHeader:
    """Decode the header at the start of a packet (trailing data allowed)."""
    if len(b) - offset < HDR_SIZE:
        raise CodecError(f"truncated header: {len(b) - offset} bytes")
    b0, req_type, sess, pkt_num, flags, req_num, msg_size = _HDR.unpack_from(b, offset)
    ptype = _PKT_TYPE_OF.get(b0 >> 4)
    if ptype is None:
        raise CodecError(f"unknown pkt_type {b0 >> 4}")
    if msg_size > MAX_MSG_SIZE:
        raise CodecError(f"msg_size {msg_size} exceeds {MAX_MSG_SIZE}")
    return PacketHeader(b0 & 0xF, ptype, req_type, sess, pkt_num, flags, req_num, msg_size)


_PKT_TYPE_OF = {int(t): t for t in PktType}
_PKT_TYPES = frozenset(_PKT_TYPE_OF)


def num_pkts_for(data_size: int, mtu_data: int) -> int:
    return max(1, -(-data_size // mtu_data))


class MsgBuf:
    """One, possibly multi-packet, message.

    ``buf`` is the whole backing region; ``data`` is a memoryview over the
    application data only.  While the RPC layer owns the buffer (between
    ``enqueue_request`` and the continuation) :meth:`write` raises
    :class:`OwnershipError` when ``debug`` is set.
    """

    __slots__ = ("buf", "capacity", "mtu_data", "max_pkts", "data_size",
                 "owned_by_rpc", "debug", "nic_refs", "wheel_refs", "readonly")

    def __init__(self, capacity: int, mtu_data: int, *, buf=None, debug: bool = True):
        self.capacity = capacity
        self.mtu_data = mtu_data
        self.max_pkts = num_pkts_for(capacity, mtu_data)
        self.buf = buf if buf is not None else bytearray(HDR_SIZE * self.max_pkts + capacity)
        self.data_size = capacity
        self.owned_by_rpc = False
        self.debug = debug
        self.nic_refs = 0
        self.wheel_refs = 0
        self.readonly = isinstance(buf, bytes) or (isinstance(buf, memoryview) and buf.readonly)

    @classmethod
    def from_packet(cls, pkt: bytes | memoryview) -> MsgBuf:
        """Borrow a received single-packet message in place (no copy)."""
        view = memoryview(pkt)
        size = len(view) - HDR_SIZE
        m = cls(max(size, 1), max(size, 1), buf=view)
        m.data_size = size
        return m

    @property
    def num_pkts(self) -> int:
        n = -(-self.data_size // self.mtu_data)
        return n if n > 1 else 1

    @property
    def data(self) -> memoryview:
        return memoryview(self.buf)[HDR_SIZE:HDR_SIZE + self.data_size]

    def tobytes(self) -> bytes:
        return bytes(self.buf[HDR_SIZE:HDR_SIZE + self.data_size])

    def resize(self, data_size: int) -> None:
        if not 0 <= data_size <= self.capacity:
            raise MsgBufSizeError(f"size {data_size} outside [0, {self.capacity}]")
        self.data_size = data_size

    def write(self, payload, offset: int = 0) -> None:
        if self.debug and self.owned_by_rpc:
            raise OwnershipError("msgbuf is owned by the RPC layer until its continuation runs")
        if self.readonly:
            raise OwnershipError("msgbuf borrows a received packet and is read-only")
        end = offset + len(payload)
        if end > self.data_size:
            raise MsgBufSizeError(f"write of {len(payload)} at {offset} overruns {self.data_size}")
        self.buf[HDR_SIZE + offset:HDR_SIZE + end] = payload

    def set_data(self, payload) -> None:
        self.resize(len(payload))
        self.write(payload)

    def hdr_offset(self, i: int) -> int:
        if i == 0:
            return 0
        return HDR_SIZE + self.capacity + HDR_SIZE * (i - 1)

    def data_offset(self) -> int:
        return HDR_SIZE

    def tx_refs(self) -> int:
        return self.nic_refs + self.wheel_refs

    def __repr__(self) -> str:
        return f"MsgBuf(data_size={self.data_size}, capacity={self.capacity}, mtu={self.mtu_data})"


def alloc_msgbuf(data_capacity: int, mtu_data: int = DEFAULT_MTU_DATA, *, debug: bool = True) -> MsgBuf:
    if not 1 <= data_capacity <= MAX_MSG_SIZE:
        raise MsgBufSizeError(f"capacity {data_capacity} outside [1, {MAX_MSG_SIZE}]")
    if mtu_data < 1:
        raise MsgBufSizeError(f"mtu_data must be >= 1, got {mtu_data}")
    return MsgBuf(data_capacity, mtu_data, debug=debug)


def pkt_data_range(m: MsgBuf, i: int) -> tuple[int, int]:
    """(offset, length) of packet ``i``'s slice of the data region."""
    n = m.num_pkts
    if not 0 <= i < n:
        raise IndexError(f"packet {i} out of range for {n}-packet message")
    off = i * m.mtu_data
    return off, min(m.mtu_data, m.data_size - off)


def pkt_bytes(m: MsgBuf, i: int) -> bytes:
    """Header + data for packet ``i`` as it would be DMA-read from ``m``.

    Packet 0 is a single contiguous slice; later packets gather their
    header from the tail of the buffer.
    """
    off, length = pkt_data_range(m, i)
    buf = m.buf
    if i == 0:
        return bytes(buf[0:HDR_SIZE + length])
    h = m.hdr_offset(i)
    return bytes(buf[h:h + HDR_SIZE]) + bytes(buf[HDR_SIZE + off:HDR_SIZE + off + length])
