"""Hosts on a single store-and-forward switch with one shared buffer pool.

Per packet the simulator schedules two events: arrival at the switch and
arrival at the destination host.  Link serialization is tracked with a
``busy_until`` horizon per link, so queues never need explicit objects;
the switch frees buffer space lazily from a heap of departure times.
"""

from __future__ import annotations

import hashlib
import heapq
import random
import struct
from collections import deque
from dataclasses import dataclass, field

from ..transport.base import CpuModel, EndpointId
from .clock import VirtualClock
from .config import SimConfig


class Link:
    __slots__ = ("name", "rate_bps", "prop_ns", "loss", "reorder", "reorder_ns", "busy_until",
                 "rng", "reorder_rng", "tx_pkts", "tx_bytes", "lost", "reordered")

    def __init__(self, name: str, rate_bps: int, prop_ns: int, seed: int, loss: float = 0.0,
                 reorder: float = 0.0, reorder_ns: int = 0):
        self.name = name
        self.rate_bps = rate_bps
        self.prop_ns = prop_ns
        self.loss = loss
        self.reorder = reorder
        self.reorder_ns = reorder_ns
        self.busy_until = 0
        self.rng = random.Random(f"{seed}/loss/{name}")
        self.reorder_rng = random.Random(f"{seed}/reorder/{name}")
        self.tx_pkts = 0
        self.tx_bytes = 0
        self.lost = 0
        self.reordered = 0

    def ser_ns(self, nbytes: int) -> int:
        return -(-nbytes * 8_000_000_000 // self.rate_bps)


@dataclass
class SwitchModel:
    pool_bytes: int
    fwd_ns: int
    used: int = 0
    peak: int = 0
    drops: int = 0
    port_drops: dict = field(default_factory=dict)
    departures: list = field(default_factory=list)

    def occupancy(self, now: int) -> int:
        dep = self.departures
        while dep and dep[0][0] <= now:
            self.used -= heapq.heappop(dep)[1]
        return self.used


class Host:
    def __init__(self, host_id: int, uplink: Link, downlink: Link):
        self.id = host_id
        self.uplink = uplink
        self.downlink = downlink
        self.transports: dict[int, object] = {}
        self.alive = True
        self.dma_q: deque = deque()
        self.rx_bytes = 0
        self.rx_pkts = 0
        self.dead_drops = 0

    def dma(self, now: int) -> None:
        """The NIC has read every queued packet whose transmission started."""
        q = self.dma_q
        while q and q[0][0] <= now:
            q.popleft()[1].materialize()

    def flush(self) -> None:
        q = self.dma_q
        while q:
            q.popleft()[1].materialize()


_TRACE_REC = struct.Struct("<qHHHH")


class SimNet:
    def __init__(self, config: SimConfig | None = None, cpu: CpuModel | None = None):
        self.cfg = config or SimConfig()
        self.cpu = cpu or CpuModel()
        self.clock = VirtualClock()
        self.switch = SwitchModel(self.cfg.switch_buffer_bytes, self.cfg.switch_fwd_ns)
        self.hosts: dict[int, Host] = {}
        self.overhead = self.cfg.wire_overhead_bytes
        self.trace = hashlib.sha256() if self.cfg.trace else None
        self.trace_pkts = 0
        self.unroutable = 0
        self.ctrl_msgs = 0

    # -- topology ----------------------------------------------------------

    def add_host(self, host_id: int | None = None) -> Host:
        cfg = self.cfg
        hid = len(self.hosts) if host_id is None else host_id
        if hid in self.hosts:
            raise ValueError(f"host {hid} already exists")
        up = Link(f"h{hid}->sw", cfg.link_bps, cfg.prop_ns, cfg.seed)
        down = Link(f"sw->h{hid}", cfg.link_bps, cfg.prop_ns, cfg.seed, loss=cfg.loss_rate,
                    reorder=cfg.reorder_rate, reorder_ns=int(cfg.reorder_delay_us * 1000))
        h = Host(hid, up, down)
        self.hosts[hid] = h
        self.switch.port_drops[hid] = 0
        return h

    def transport(self, host_id: int, port: int = 0, rq_size: int | None = None):
        from ..transport.sim import SimTransport

        host = self.hosts.get(host_id) or self.add_host(host_id)
        if port in host.transports:
            raise ValueError(f"port {port} on host {host_id} is taken")
        tr = SimTransport(self, host, port, rq_size or self.cfg.rq_size, self.cpu)
        host.transports[port] = tr
        return tr

    def create_rpc(self, host_id: int, port: int = 0, config=None, **kwargs):
        from ..endpoint import Rpc

        return Rpc(self.transport(host_id, port, getattr(config, "rq_size", None)), config, **kwargs)

    def kill_host(self, host_id: int) -> None:
        h = self.hosts[host_id]
        h.alive = False
        while h.dma_q:
            h.dma_q.popleft()[1].drop_ref()

    # -- time --------------------------------------------------------------

    @property
    def now(self) -> int:
        return self.clock.now

    def run_until(self, t_ns: int) -> None:
        self.clock.run_until(t_ns)

    def run_for(self, dt_ns: int) -> None:
        self.clock.run_until(self.clock.now + dt_ns)

    def run_until_idle(self, limit_ns: int | None = None) -> None:
        clock = self.clock
        while True:
            t = clock.next_time()
            if t is None or (limit_ns is not None and t > limit_ns):
                return
            clock.run_until(t)

    def run_until_true(self, pred, limit_ns: int, step_ns: int = 50_000) -> bool:
        """Advance in ``step_ns`` chunks until ``pred()`` holds (or ``limit_ns`` passes)."""
        clock = self.clock
        end = clock.now + limit_ns
        while clock.now < end:
            if pred():
                return True
            t = clock.next_time()
            if t is None:
                clock.run_until(end)
                break
            clock.run_until(min(max(t, clock.now + step_ns), end))
        return pred()

    # -- data path ---------------------------------------------------------

    def host_send(self, host: Host, src: EndpointId, pkts, at: int) -> None:
        up = host.uplink
        sched = self.clock.schedule
        over = self.overhead
        arrive = self._switch_arrive
        dma_q = host.dma_q
        for p in pkts:
            wire = p.size + over
            start = at if at > up.busy_until else up.busy_until
            end = start + up.ser_ns(wire)
            up.busy_until = end
            up.tx_pkts += 1
            up.tx_bytes += wire
            if p.data is None:
                dma_q.append((start, p))
            sched(end + up.prop_ns, arrive, (src, p, wire))

    def _switch_arrive(self, rec) -> None:
        src, p, wire = rec
        data = p.materialize()
        dst = p.dest
        host = self.hosts.get(dst.host)
        if host is None:
            self.unroutable += 1
            return
        now = self.clock.now
        sw = self.switch
        dep = sw.departures
        while dep and dep[0][0] <= now:
            sw.used -= heapq.heappop(dep)[1]
        if sw.used + wire > sw.pool_bytes:
            sw.drops += 1
            sw.port_drops[dst.host] += 1
            return
        sw.used += wire
        if sw.used > sw.peak:
            sw.peak = sw.used
        down = host.downlink
        start = now + sw.fwd_ns
        if down.busy_until > start:
            start = down.busy_until
        end = start + down.ser_ns(wire)
        down.busy_until = end
        down.tx_pkts += 1
        down.tx_bytes += wire
        heapq.heappush(dep, (end, wire))
        if down.loss and down.rng.random() < down.loss:
            down.lost += 1
            return
        t = end + down.prop_ns
        if down.reorder and down.reorder_rng.random() < down.reorder:
            down.reordered += 1
            t += down.reorder_ns
        self.clock.schedule(t, self._host_arrive, (src, dst, data))

    def _host_arrive(self, rec) -> None:
        src, dst, data = rec
        host = self.hosts[dst.host]
        if not host.alive:
            host.dead_drops += 1
            return
        tr = host.transports.get(dst.port)
        if tr is None:
            self.unroutable += 1
            return
        if self.trace is not None:
            self.trace.update(_TRACE_REC.pack(self.clock.now, src.host, src.port, dst.host, dst.port))
            self.trace.update(data)
            self.trace_pkts += 1
        host.rx_pkts += 1
        host.rx_bytes += len(data)
        if tr.rxq.offer(src, data):
            tr.kick(self.clock.now)

    # -- management channel (lossless, fixed delay) --------------------------

    def ctrl_send(self, src: EndpointId, dst: EndpointId, data: bytes, at: int) -> None:
        self.ctrl_msgs += 1
        self.clock.schedule(at + int(self.cfg.ctrl_delay_us * 1000), self._ctrl_arrive, (src, dst, data))

    def _ctrl_arrive(self, rec) -> None:
        src, dst, data = rec
        host = self.hosts.get(dst.host)
        if host is None or not host.alive:
            return
        tr = host.transports.get(dst.port)
        if tr is not None:
            tr.ctrl_inbox.append((src, data))
            tr.kick(self.clock.now)

    # -- stats ---------------------------------------------------------------

    def trace_digest(self) -> str:
        if self.trace is None:
            raise RuntimeError("tracing disabled; set trace = true in the config")
        return self.trace.hexdigest()

    def drops(self) -> dict[str, int]:
        return {
            "switch": self.switch.drops,
            "loss": sum(h.downlink.lost for h in self.hosts.values()),
            "rxq": sum(t.rxq.drops for h in self.hosts.values() for t in h.transports.values()),
            "dead": sum(h.dead_drops for h in self.hosts.values()),
        }


def build_topology(config: SimConfig | None = None, num_hosts: int = 2, cpu: CpuModel | None = None) -> SimNet:
    net = SimNet(config, cpu)
    for _ in range(num_hosts):
        net.add_host()
    return net
