"""Session-management messages (connect handshake and heartbeats).

Every message is ``<version:u8><type:u8><body_len:u16>`` followed by a
little-endian body::

    CONNECT_REQ   client_session:u16 credits:u16 num_slots:u16 mtu_data:u16
    CONNECT_RESP  client_session:u16 server_session:u16 status:u8
    HEARTBEAT     seq:u32
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MGMT_VERSION = 1

_PREFIX = struct.Struct("<BBH")
_CONNECT_REQ = struct.Struct("<HHHH")
_CONNECT_RESP = struct.Struct("<HHB")
_HEARTBEAT = struct.Struct("<I")


class MgmtCodecError(ValueError):
    pass


class MgmtType(enum.IntEnum):
    CONNECT_REQ = 1
    CONNECT_RESP = 2
    HEARTBEAT = 3


class ConnectStatus(enum.IntEnum):
    OK = 0
    NO_BUDGET = 1
    BAD_PARAMS = 2


@dataclass(frozen=True)
class ConnectReq:
    client_session: int
    credits: int
    num_slots: int
    mtu_data: int


@dataclass(frozen=True)
class ConnectResp:
    client_session: int
    server_session: int
    status: ConnectStatus = ConnectStatus.OK


@dataclass(frozen=True)
class Heartbeat:
    seq: int


_BODIES = {
    MgmtType.CONNECT_REQ: (ConnectReq, _CONNECT_REQ),
    MgmtType.CONNECT_RESP: (ConnectResp, _CONNECT_RESP),
    MgmtType.HEARTBEAT: (Heartbeat, _HEARTBEAT),
}
_TYPES = {cls: t for t, (cls, _) in _BODIES.items()}


def encode(msg) -> bytes:
    mtype = _TYPES[type(msg)]
    _, st = _BODIES[mtype]
    try:
        body = st.pack(*(int(v) for v in vars(msg).values()))
    except struct.error as exc:
        raise MgmtCodecError(str(exc)) from exc
    return _PREFIX.pack(MGMT_VERSION, mtype, len(body)) + body


def decode(data: bytes):
    if len(data) < _PREFIX.size:
        raise MgmtCodecError("truncated management message")
    version, mtype, length = _PREFIX.unpack_from(data)
    if version != MGMT_VERSION:
        raise MgmtCodecError(f"unsupported management version {version}")
    if mtype not in _BODIES.keys():
        raise MgmtCodecError(f"unknown management message type {mtype}")
    cls, st = _BODIES[MgmtType(mtype)]
    if length != st.size or len(data) != _PREFIX.size + length:
        raise MgmtCodecError(f"bad length {length} for {cls.__name__}")
    fields = st.unpack_from(data, _PREFIX.size)
    if cls is ConnectResp:
        try:
            fields = (*fields[:2], ConnectStatus(fields[2]))
        except ValueError:
            raise MgmtCodecError(f"unknown connect status {fields[2]}") from None
    return cls(*fields)
