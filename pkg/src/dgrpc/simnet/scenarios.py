"""Experiment drivers on the simulated network.

Each driver builds a fresh topology, so a (config, seed) pair always
produces the same numbers.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from ..congestion import CongestionKnobs
from ..endpoint import HandlerMode, Rpc, RpcConfig, Status
from ..transport.base import CpuModel
from .config import SimConfig
from .net import SimNet, build_topology

ECHO = 1
SINK = 2
SLOW = 3

CSV_COLUMNS = ("scenario", "fan_in", "cc", "bytes", "p50_rtt_us", "p99_rtt_us", "drops")


def percentile(values, q: float) -> float:
    """Nearest-rank percentile (``q`` in [0, 100]); NaN for no data."""
    if not values:
        return math.nan
    s = sorted(values)
    k = max(0, math.ceil(q / 100.0 * len(s)) - 1)
    return float(s[k])


@dataclass
class ScenarioRow:
    scenario: str
    fan_in: int
    cc: bool
    bytes: int
    p50_rtt_us: float
    p99_rtt_us: float
    drops: int
    extra: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        return [self.scenario, self.fan_in, int(self.cc), self.bytes,
                f"{self.p50_rtt_us:.3f}", f"{self.p99_rtt_us:.3f}", self.drops]


def _rpc_config(base: RpcConfig | None, **changes) -> RpcConfig:
    cfg = base or RpcConfig()
    knobs = changes.pop("knobs", None) or cfg.knobs
    return dataclasses.replace(cfg, knobs=dataclasses.replace(knobs), **changes)


def _with_cc(knobs: CongestionKnobs, cc: bool) -> CongestionKnobs:
    return dataclasses.replace(knobs, enable_cc=cc)


def _echo(handle) -> None:
    handle.respond(bytes(handle.request.data))


def _sink(handle) -> None:
    handle.respond(b"\0" * 32)


def connect_all(net: SimNet, rpcs: list[Rpc], server: Rpc, **kw) -> list:
    sessions = [r.create_session(server.local, **kw) for r in rpcs]
    net.run_until_true(lambda: all(s.connected for s in sessions), 100_000_000)
    if not all(s.connected for s in sessions):
        raise RuntimeError("sessions failed to connect")
    return sessions


class ClosedLoopClient:
    """Keeps ``depth`` requests outstanding on one session, forever."""

    def __init__(self, rpc: Rpc, session, req_type: int, size: int, depth: int = 1,
                 limit: int | None = None):
        self.rpc = rpc
        self.session = session
        self.req_type = req_type
        self.size = size
        self.limit = limit
        self.issued = 0
        self.completed = 0
        self.failed = 0
        self.bytes_done = 0
        self.latencies: list[int] = []
        self.done_at: list[int] = []
        self.record_from = 0
        for _ in range(depth):
            self._issue(rpc.alloc_msgbuf(size), rpc.alloc_msgbuf(max(size, 32)))

    def _issue(self, req, resp) -> None:
        if self.limit is not None and self.issued >= self.limit:
            return
        self.issued += 1
        req.resize(self.size)
        self.rpc.enqueue_request(self.session, self.req_type, req, self._done, resp)

    def _done(self, c) -> None:
        now = self.rpc.transport.now_ns()
        if c.status is Status.OK:
            self.completed += 1
            self.bytes_done += self.size
            if now >= self.record_from:
                self.latencies.append(c.latency_ns)
                self.done_at.append(now)
        else:
            self.failed += 1
            return
        self._issue(c.req, c.resp if c.resp is not None else self.rpc.alloc_msgbuf(32))


# -- latency -------------------------------------------------------------------


def latency_scenario(num_rpcs: int = 1000, size: int = 32, sim: SimConfig | None = None,
                     rpc: RpcConfig | None = None, cpu: CpuModel | None = None) -> dict:
    """One outstanding ``size``-byte echo RPC at a time; latency percentiles in µs."""
    net = build_topology(sim or SimConfig(), 2, cpu)
    cfg = _rpc_config(rpc)
    server = net.create_rpc(1, config=cfg)
    server.register_handler(ECHO, _echo)
    client = net.create_rpc(0, config=cfg)
    (sess,) = connect_all(net, [client], server)
    cl = ClosedLoopClient(client, sess, ECHO, size, depth=1, limit=num_rpcs)
    net.run_until_true(lambda: cl.completed + cl.failed >= num_rpcs, 600 * 10**9)
    lat = [x / 1000.0 for x in cl.latencies]
    return {
        "rpcs": cl.completed, "failed": cl.failed,
        "p50_us": percentile(lat, 50), "p99_us": percentile(lat, 99), "p999_us": percentile(lat, 99.9),
        "retransmissions": client.stats.retransmissions, "drops": sum(net.drops().values()),
    }


# -- request rate ----------------------------------------------------------------


def rate_scenario(num_nodes: int = 4, batch: int = 8, duration_ns: int = 2_000_000,
                  warmup_ns: int = 200_000, size: int = 32, sim: SimConfig | None = None,
                  rpc: RpcConfig | None = None, cpu: CpuModel | None = None) -> dict:
    """Every node is both client and server and keeps ``batch`` requests in
    flight to every other node; returns per-endpoint requests per second."""
    net = build_topology(sim or SimConfig(), num_nodes, cpu)
    cfg = _rpc_config(rpc)
    rpcs = [net.create_rpc(i, config=cfg) for i in range(num_nodes)]
    for r in rpcs:
        r.register_handler(ECHO, _echo)
    clients = []
    for i, r in enumerate(rpcs):
        for j, peer in enumerate(rpcs):
            if i != j:
                sess = r.create_session(peer.local)
                clients.append((r, sess))
    net.run_until_true(lambda: all(s.connected for _, s in clients), 100_000_000)
    per_peer = max(1, batch // max(1, num_nodes - 1))
    loops = [ClosedLoopClient(r, s, ECHO, size, depth=per_peer) for r, s in clients]
    start = net.now + warmup_ns
    for cl in loops:
        cl.record_from = start
    net.run_until(start + duration_ns)
    done = sum(sum(1 for t in cl.done_at if t <= start + duration_ns) for cl in loops)
    rate = done / (duration_ns / 1e9) / num_nodes
    return {"rate_per_endpoint": rate, "completed": done,
            "retransmissions": sum(r.stats.retransmissions for r in rpcs)}


# -- bandwidth / loss ---------------------------------------------------------------


def bandwidth_run(msg_size: int = 8 * 1024 * 1024, loss: float = 0.0, num_msgs: int = 4,
                  credits: int = 32, sim: SimConfig | None = None, rpc: RpcConfig | None = None,
                  cpu: CpuModel | None = None, time_limit_ns: int = 60 * 10**9) -> dict:
    """One client sends ``num_msgs`` back-to-back ``msg_size`` requests, one
    outstanding at a time; goodput is request bytes over elapsed time."""
    base = sim or SimConfig()
    net = build_topology(dataclasses.replace(base, loss_rate=loss), 2, cpu)
    cfg = _rpc_config(rpc, credits=credits)
    server = net.create_rpc(1, config=cfg)
    server.register_handler(SINK, _sink)
    client = net.create_rpc(0, config=cfg)
    (sess,) = connect_all(net, [client], server)
    t0 = net.now
    cl = ClosedLoopClient(client, sess, SINK, msg_size, depth=1, limit=num_msgs)
    net.run_until_true(lambda: cl.completed + cl.failed >= num_msgs, time_limit_ns)
    elapsed = (cl.done_at[-1] if cl.done_at else net.now) - t0
    gbps = cl.bytes_done * 8 / elapsed if elapsed > 0 else 0.0
    return {"loss": loss, "goodput_gbps": gbps, "completed": cl.completed, "elapsed_ns": elapsed,
            "retransmissions": client.stats.retransmissions, "lost": net.drops()["loss"]}


def loss_sweep(rates=(0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3), msg_size: int = 8 * 1024 * 1024,
               num_msgs: int = 4, **kw) -> list[dict]:
    """Goodput per loss rate.  Every run uses the same seed, so the loss
    draws are common random numbers and rates differ only in the threshold."""
    return [bandwidth_run(msg_size, r, num_msgs, **kw) for r in rates]


# -- incast --------------------------------------------------------------------------


def incast_scenario(fan_in: int, cc_enabled: bool, msg_size: int = 8 * 1024 * 1024,
                    duration_ns: int = 10_000_000, warmup_ns: int = 5_000_000, credits: int = 32,
                    sim: SimConfig | None = None, rpc: RpcConfig | None = None,
                    cpu: CpuModel | None = None) -> ScenarioRow:
    """``fan_in`` clients each keep one ``msg_size`` request in flight to a
    single victim.  Bandwidth is what the victim receives after warmup;
    RTTs are per-packet client samples after warmup."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    net = build_topology(sim or SimConfig(), fan_in + 1, cpu)
    base = rpc or RpcConfig()
    cfg = _rpc_config(base, credits=credits, record_rtts=True,
                      knobs=_with_cc(base.knobs, cc_enabled))
    victim = net.create_rpc(0, config=cfg)
    victim.register_handler(SINK, _sink)
    clients = [net.create_rpc(i + 1, config=cfg) for i in range(fan_in)]
    sessions = connect_all(net, clients, victim)
    for r in clients:
        r.stats.rtt_ns.clear()
    loops = [ClosedLoopClient(r, s, SINK, msg_size, depth=1) for r, s in zip(clients, sessions)]
    net.run_for(warmup_ns)
    for r in clients:
        r.stats.rtt_ns.clear()
    host = net.hosts[0]
    rx0 = host.rx_bytes
    drops0 = sum(net.drops().values())
    net.run_for(duration_ns)
    rx = host.rx_bytes - rx0
    rtts = [x / 1000.0 for r in clients for x in r.stats.rtt_ns]
    bw = rx * 8 / (duration_ns / 1e9)
    return ScenarioRow(
        "incast", fan_in, cc_enabled, rx, percentile(rtts, 50), percentile(rtts, 99),
        sum(net.drops().values()) - drops0,
        extra={"bw_bps": bw, "link_bps": net.cfg.link_bps, "peak_switch_bytes": net.switch.peak,
               "rtt_samples": len(rtts), "completed": sum(c.completed for c in loops),
               "min_rate_bps": min(s.timely.rate for s in sessions)},
    )
