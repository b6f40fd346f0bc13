from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from ..msgbuf import HDR_SIZE, pkt_bytes


class TransportConfigError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True, order=True)
class EndpointId:
    host: object
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


class OutPacket:
    """A packet handed to the transmit path.

    Data packets keep a reference into their msgbuf until the "NIC" reads
    them (:meth:`materialize`); header-only packets carry their own bytes.
    """

    __slots__ = ("dest", "msgbuf", "pkt_idx", "data", "size")

    def __init__(self, dest: EndpointId, msgbuf=None, pkt_idx: int = 0, data: bytes | None = None,
                 size: int = HDR_SIZE):
        self.dest = dest
        self.msgbuf = msgbuf
        self.pkt_idx = pkt_idx
        self.data = data
        self.size = size
        if msgbuf is not None:
            msgbuf.nic_refs += 1

    def materialize(self) -> bytes:
        if self.data is None:
            m = self.msgbuf
            self.data = pkt_bytes(m, self.pkt_idx)
            m.nic_refs -= 1
            self.msgbuf = None
        return self.data

    def drop_ref(self) -> None:
        """Discard without transmitting (dead destination, torn-down queue)."""
        if self.data is None and self.msgbuf is not None:
            self.msgbuf.nic_refs -= 1
            self.msgbuf = None
            self.data = b""


class RxBuffer:
    __slots__ = ("data", "released", "seq")

    def __init__(self, data: bytes, seq: int):
        self.data = data
        self.released = False
        self.seq = seq


class RxQueue:
    """Receive ring with ``capacity`` descriptors.

    A descriptor is consumed when a packet arrives and only comes back when
    the protocol layer releases the buffer; arrivals with no free
    descriptor are dropped.
    """

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._ring: list[tuple[object, RxBuffer]] = []
        self._head = 0
        self.lent = 0
        self.drops = 0
        self.accepted = 0

    @property
    def queued(self) -> int:
        return len(self._ring) - self._head

    @property
    def free(self) -> int:
        return self.capacity - self.queued - self.lent

    def offer(self, src, data: bytes) -> bool:
        if self.free <= 0:
            self.drops += 1
            return False
        self._ring.append((src, RxBuffer(data, self.accepted)))
        self.accepted += 1
        return True

    def burst(self, max_pkts: int) -> list[tuple[object, RxBuffer]]:
        if max_pkts < 1:
            raise ValueError("max must be >= 1")
        ring, head = self._ring, self._head
        end = min(len(ring), head + max_pkts)
        out = ring[head:end]
        if end == len(ring):
            self._ring = []
            self._head = 0
        else:
            self._head = end
        self.lent += len(out)
        return out

    def release(self, bufs) -> None:
        for b in bufs:
            assert not b.released, f"double release of rx buffer {b.seq}"
            b.released = True
        self.lent -= len(bufs)


@dataclass
class CpuModel:
    """Virtual CPU cost (ns) charged by the endpoint for each piece of work.

    Only the simulated transport turns these into elapsed time.
    """

    loop_ns: int = 20
    rx_pkt_ns: int = 40
    tx_pkt_ns: int = 40
    copy_ns_per_kb: int = 100
    alloc_ns: int = 60
    timestamp_ns: int = 8
    timely_update_ns: int = 20
    wheel_insert_ns: int = 15
    handler_ns: int = 20
    continuation_ns: int = 20
    flush_tx_ns: int = 2000

    def copy_ns(self, nbytes: int) -> int:
        return nbytes * self.copy_ns_per_kb // 1024


ZERO_CPU = CpuModel(0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0)


class Transport(Protocol):
    local: EndpointId
    rxq: RxQueue
    cpu: CpuModel

    def now_ns(self) -> int: ...
    def charge(self, ns: int) -> None: ...
    def tx_burst(self, pkts: list[OutPacket]) -> int: ...
    def rx_burst(self, max_pkts: int) -> list[tuple[EndpointId, RxBuffer]]: ...
    def release_rx(self, bufs) -> None: ...
    def flush_tx(self) -> None: ...
    def wake(self) -> None: ...
    def send_ctrl(self, dest: EndpointId, data: bytes) -> None: ...
    def poll_ctrl(self) -> list[tuple[EndpointId, bytes]]: ...
