from .base import (ZERO_CPU, CpuModel, EndpointId, OutPacket, RxBuffer, RxQueue, Transport,
                   TransportConfigError)
from .sim import SimTransport
from .udp import UdpTransport

__all__ = [
    "ZERO_CPU", "CpuModel", "EndpointId", "OutPacket", "RxBuffer", "RxQueue", "SimTransport",
    "Transport", "TransportConfigError", "UdpTransport",
]
