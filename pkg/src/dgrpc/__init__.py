"""Asynchronous RPCs over unreliable datagrams, with a network simulator."""

from .congestion import CongestionKnobs
from .endpoint import Completion, HandlerMode, ReqHandle, Rpc, RpcConfig, RpcError, Status
from .msgbuf import MsgBuf, PacketHeader, PktType, alloc_msgbuf, pack_header, unpack_header
from .session import Session, SessionError
from .simnet import SimConfig, SimNet, build_topology
from .transport import CpuModel, EndpointId, UdpTransport

__version__ = "0.1.0"

__all__ = [
    "Completion", "CongestionKnobs", "CpuModel", "EndpointId", "HandlerMode", "MsgBuf",
    "PacketHeader", "PktType", "ReqHandle", "Rpc", "RpcConfig", "RpcError", "Session",
    "SessionError", "SimConfig", "SimNet", "Status", "UdpTransport", "alloc_msgbuf",
    "build_topology", "pack_header", "unpack_header",
]
