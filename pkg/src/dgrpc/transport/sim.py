"""Transport adapter between one endpoint and a :class:`SimNet`.

The endpoint's event loop runs as simulator events.  Each iteration starts
at an event time, and every unit of work the endpoint charges advances
its local clock, so packets handed to the NIC mid-iteration leave at
``iteration start + cost so far``.  The CPU is busy until the iteration's
total cost has elapsed; arrivals in the meantime wait for the next one.
"""

from __future__ import annotations

from .base import CpuModel, EndpointId, OutPacket, RxQueue


class SimTransport:
    def __init__(self, net, host, port: int, rq_size: int, cpu: CpuModel):
        self.net = net
        self.host = host
        self.local = EndpointId(host.id, port)
        self.rxq = RxQueue(rq_size)
        self.cpu = cpu
        self.ctrl_inbox: list[tuple[EndpointId, bytes]] = []
        self.endpoint = None
        self.cpu_free_at = 0
        self.iterations = 0
        self.busy_ns = 0
        self.tx_pkts = 0
        self.flushes = 0
        self._in_iter = False
        self._iter_start = 0
        self._charged = 0
        self._pending_at: int | None = None
        self._gen = 0

    def attach(self, endpoint) -> None:
        self.endpoint = endpoint

    # -- clock -------------------------------------------------------------

    def now_ns(self) -> int:
        if self._in_iter:
            return self._iter_start + self._charged
        return self.net.clock.now

    def charge(self, ns: int) -> None:
        self._charged += ns

    # -- scheduling ----------------------------------------------------------

    def kick(self, t: int) -> None:
        """Make sure an iteration runs no later than ``t`` (or when the CPU frees up)."""
        if t < self.cpu_free_at:
            t = self.cpu_free_at
        if self._pending_at is not None and self._pending_at <= t:
            return
        self._gen += 1
        self._pending_at = t
        self.net.clock.schedule(t, self._run, self._gen)

    def wake(self) -> None:
        if not self._in_iter:
            self.kick(self.net.clock.now)

    def _run(self, gen: int) -> None:
        if gen != self._gen:
            return
        self._pending_at = None
        if not self.host.alive or self.endpoint is None:
            return
        self.run_iteration()
        nxt = self.endpoint.next_wake_ns()
        if self.rxq.queued or self.ctrl_inbox:
            nxt = self.cpu_free_at
        if nxt is not None:
            self.kick(nxt)

    def run_iteration(self) -> None:
        now = self.net.clock.now
        self._iter_start = now if now > self.cpu_free_at else self.cpu_free_at
        self._charged = 0
        self._in_iter = True
        self.host.dma(self._iter_start)
        try:
            self.endpoint.run_once()
        finally:
            self._in_iter = False
        self.iterations += 1
        self.busy_ns += self._charged
        self.cpu_free_at = self._iter_start + self._charged

    # -- data path ---------------------------------------------------------

    def tx_burst(self, pkts: list[OutPacket]) -> int:
        if not pkts:
            return 0
        if not self.host.alive:
            for p in pkts:
                p.drop_ref()
            return 0
        self.net.host_send(self.host, self.local, pkts, self.now_ns())
        self.tx_pkts += len(pkts)
        return len(pkts)

    def rx_burst(self, max_pkts: int):
        return self.rxq.burst(max_pkts)

    def release_rx(self, bufs) -> None:
        self.rxq.release(bufs)

    def flush_tx(self) -> None:
        # The caller charges the stall; here the NIC reads everything queued.
        self.flushes += 1
        self.host.flush()

    def tx_queue_refs(self) -> int:
        return sum(1 for _, p in self.host.dma_q if p.data is None)

    # -- management channel --------------------------------------------------

    def send_ctrl(self, dest: EndpointId, data: bytes) -> None:
        self.net.ctrl_send(self.local, dest, data, self.now_ns())

    def poll_ctrl(self) -> list[tuple[EndpointId, bytes]]:
        out = list(self.ctrl_inbox)
        self.ctrl_inbox.clear()
        return out
