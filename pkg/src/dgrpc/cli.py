"""``bench``: benchmark and demo harness.

Every report starts with ``#`` comment lines recording the command, the
full configuration, the seed and the git revision, followed by CSV.  The
same rows are echoed to stdout as an aligned table.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import subprocess
import sys
import time
from pathlib import Path

from .congestion import CongestionKnobs
from .endpoint import Rpc, RpcConfig
from .simnet import scenarios
from .simnet.config import ConfigError, SimConfig
from .simnet.net import build_topology

MiB = 1024 * 1024


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="RPC benchmarks on a simulated or UDP network")
    p.add_argument("command", choices=["latency", "rate", "bandwidth", "incast", "kv"])
    p.add_argument("--transport", choices=["sim", "udp"], default="sim")
    p.add_argument("--config", type=Path, help="key = value topology file for the simulator")
    p.add_argument("--batch", type=int, default=8, help="requests kept in flight per endpoint (rate)")
    p.add_argument("--credits", type=int, default=None, help="session credits (default 8; 32 for bandwidth/incast)")
    p.add_argument("--loss", type=_floats, default=None,
                   help="comma-separated loss rates (bandwidth sweeps all; others use the first)")
    p.add_argument("--fan-in", type=_ints, default=[50], help="comma-separated incast fan-in values")
    p.add_argument("--size", type=int, default=None, help="message size in bytes")
    p.add_argument("--num", type=int, default=None, help="number of RPCs / messages / operations")
    p.add_argument("--nodes", type=int, default=4, help="endpoints in the rate benchmark")
    p.add_argument("--duration-ms", type=float, default=None, help="measured virtual time")
    p.add_argument("--disable-cc", action="store_true")
    p.add_argument("--disable-timely-bypass", action="store_true")
    p.add_argument("--disable-limiter-bypass", action="store_true")
    p.add_argument("--disable-batched-ts", action="store_true")
    p.add_argument("--disable-prealloc", action="store_true")
    p.add_argument("--disable-zerocopy-rx", action="store_true")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", type=Path, help="CSV output path (default: stdout only)")
    return p


@dataclasses.dataclass
class BenchConfig:
    command: str
    transport: str
    sim: SimConfig
    rpc: RpcConfig
    batch: int
    credits: int | None
    loss: list
    fan_in: list
    size: int | None
    num: int | None
    nodes: int
    duration_ms: float | None
    seed: int

    def validate(self) -> None:
        if self.batch < 1:
            raise ValueError("--batch must be >= 1")
        if self.credits is not None and not 1 <= self.credits <= 0xFFFF:
            raise ValueError("--credits must be in [1, 65535]")
        if self.size is not None and not 1 <= self.size <= 8 * MiB:
            raise ValueError("--size must be in [1, 8 MiB]")
        if any(not 0.0 <= x < 1.0 for x in self.loss):
            raise ValueError("--loss values must be in [0, 1)")
        if any(f < 1 for f in self.fan_in):
            raise ValueError("--fan-in values must be >= 1")
        if self.transport == "udp" and self.command not in ("latency",):
            raise ValueError(f"'{self.command}' runs on the simulator only")

    def describe(self) -> list[str]:
        knobs = self.rpc.knobs
        items = {
            "command": self.command, "transport": self.transport, "seed": self.seed,
            "batch": self.batch, "credits": self.credits, "loss": self.loss, "fan_in": self.fan_in,
            "size": self.size, "num": self.num, "nodes": self.nodes, "duration_ms": self.duration_ms,
            "enable_cc": knobs.enable_cc, "timely_bypass": knobs.timely_bypass,
            "limiter_bypass": knobs.limiter_bypass, "batched_timestamps": knobs.batched_timestamps,
            "prealloc_responses": self.rpc.prealloc_responses, "zerocopy_rx": self.rpc.zerocopy_rx,
        }
        lines = [f"{k}={v}" for k, v in items.items()]
        lines += [f"sim.{f.name}={getattr(self.sim, f.name)}" for f in dataclasses.fields(self.sim)]
        return lines


def config_from_args(args) -> BenchConfig:
    sim = SimConfig.from_file(args.config) if args.config else SimConfig()
    sim = dataclasses.replace(sim, seed=args.seed)
    knobs = CongestionKnobs(
        enable_cc=not args.disable_cc,
        timely_bypass=not args.disable_timely_bypass,
        limiter_bypass=not args.disable_limiter_bypass,
        batched_timestamps=not args.disable_batched_ts,
    )
    rpc = RpcConfig(knobs=knobs, prealloc_responses=not args.disable_prealloc,
                    zerocopy_rx=not args.disable_zerocopy_rx)
    if args.credits is not None:
        rpc = dataclasses.replace(rpc, credits=args.credits)
    loss = args.loss if args.loss is not None else [sim.loss_rate]
    cfg = BenchConfig(args.command, args.transport, sim, rpc, args.batch, args.credits, loss,
                      args.fan_in, args.size, args.num, args.nodes, args.duration_ms, args.seed)
    cfg.validate()
    return cfg


# -- commands ----------------------------------------------------------------------


def cmd_latency(cfg: BenchConfig):
    size = cfg.size or 32
    num = cfg.num or 10_000
    if cfg.transport == "udp":
        r = udp_latency(num, size, cfg.rpc)
    else:
        sim = dataclasses.replace(cfg.sim, loss_rate=cfg.loss[0])
        r = scenarios.latency_scenario(num, size, sim, cfg.rpc)
    cols = ["transport", "size", "loss", "rpcs", "p50_us", "p99_us", "p999_us", "retransmissions"]
    row = [cfg.transport, size, cfg.loss[0] if cfg.transport == "sim" else 0.0, r["rpcs"],
           f"{r['p50_us']:.3f}", f"{r['p99_us']:.3f}", f"{r['p999_us']:.3f}", r["retransmissions"]]
    return cols, [row]


# Cumulative rows in the order the factor analysis disables them.
RATE_STEPS = (
    ("baseline", {}),
    ("-batched_ts", {"batched_timestamps": False}),
    ("-timely_bypass", {"timely_bypass": False}),
    ("-limiter_bypass", {"limiter_bypass": False}),
    ("-prealloc", {"prealloc_responses": False}),
    ("-zerocopy_rx", {"zerocopy_rx": False}),
)


def rate_configs(base: RpcConfig):
    knobs = dataclasses.asdict(base.knobs)
    rpc = {"prealloc_responses": base.prealloc_responses, "zerocopy_rx": base.zerocopy_rx}
    for name, change in RATE_STEPS:
        for k, v in change.items():
            (rpc if k in rpc else knobs)[k] = v
        yield name, dataclasses.replace(base, knobs=CongestionKnobs(**knobs), **rpc)


def cmd_rate(cfg: BenchConfig):
    dur = int((cfg.duration_ms or 1.0) * 1e6)
    rows = []
    for name, rpc in rate_configs(cfg.rpc):
        r = scenarios.rate_scenario(cfg.nodes, cfg.batch, dur, size=cfg.size or 32, sim=cfg.sim, rpc=rpc)
        rows.append([name, cfg.nodes, cfg.batch, f"{r['rate_per_endpoint'] / 1e6:.4f}", r["completed"],
                     r["retransmissions"]])
    return ["config", "nodes", "batch", "mrps_per_endpoint", "completed", "retransmissions"], rows


def cmd_bandwidth(cfg: BenchConfig):
    rates = cfg.loss if cfg.loss != [cfg.sim.loss_rate] or len(cfg.loss) > 1 else [
        0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3]
    size = cfg.size or 8 * MiB
    rows = []
    for r in scenarios.loss_sweep(rates, size, cfg.num or 4, credits=cfg.credits or 32,
                                  sim=cfg.sim, rpc=cfg.rpc):
        rows.append([f"{r['loss']:g}", size, f"{r['goodput_gbps']:.4f}", r["completed"],
                     r["retransmissions"], r["lost"]])
    return ["loss", "size", "goodput_gbps", "completed", "retransmissions", "lost"], rows


def cmd_incast(cfg: BenchConfig):
    dur = int((cfg.duration_ms or 10.0) * 1e6)
    ccs = [False] if cfg.rpc.knobs.enable_cc is False else [True, False]
    rows = []
    for fan in cfg.fan_in:
        for cc in ccs:
            r = scenarios.incast_scenario(fan, cc, cfg.size or 8 * MiB, duration_ns=dur,
                                          credits=cfg.credits or 32, sim=cfg.sim, rpc=cfg.rpc)
            rows.append(r.csv_row() + [f"{r.extra['bw_bps'] / 1e9:.4f}"])
    return list(scenarios.CSV_COLUMNS) + ["bw_gbps"], rows


def cmd_kv(cfg: BenchConfig):
    from .kv import run_kv_demo

    net = build_topology(cfg.sim, 2)
    r = run_kv_demo(net, num_ops=cfg.num or 5000, seed=cfg.seed)
    cols = ["ops", "errors", "ops_per_s", "get_p50_us", "get_p99_us", "scan_p50_us"]
    return cols, [[r["ops"], r["errors"], f"{r['ops_per_s']:.1f}", f"{r['get_p50_us']:.3f}",
                   f"{r['get_p99_us']:.3f}", f"{r['scan_p50_us']:.3f}"]]


COMMANDS = {"latency": cmd_latency, "rate": cmd_rate, "bandwidth": cmd_bandwidth,
            "incast": cmd_incast, "kv": cmd_kv}


def udp_latency(num: int, size: int, rpc_cfg: RpcConfig) -> dict:
    """Echo RPCs between two endpoints on loopback, both driven from this thread."""
    from .transport.udp import UdpTransport

    server = Rpc(UdpTransport("127.0.0.1"), rpc_cfg)
    client = Rpc(UdpTransport("127.0.0.1"), rpc_cfg)
    try:
        server.register_handler(scenarios.ECHO, scenarios._echo)
        sess = client.create_session(server.local)
        deadline = time.monotonic() + 5
        while not sess.connected:
            if time.monotonic() > deadline:
                raise ConnectionError(f"could not connect to {server.local}")
            client.run_once()
            server.run_once()
        lat = []
        req, resp = client.alloc_msgbuf(size), client.alloc_msgbuf(size)
        req.set_data(bytes(size))
        box = []
        for _ in range(num):
            box.clear()
            client.enqueue_request(sess, scenarios.ECHO, req, box.append, resp)
            while not box:
                client.run_once()
                server.run_once()
            lat.append(box[0].latency_ns / 1000.0)
    finally:
        client.close()
        server.close()
    pct = scenarios.percentile
    return {"rpcs": len(lat), "p50_us": pct(lat, 50), "p99_us": pct(lat, 99), "p999_us": pct(lat, 99.9),
            "retransmissions": client.stats.retransmissions}


def render(cfg: BenchConfig, cols, rows) -> tuple[str, str]:
    buf = io.StringIO()
    for line in cfg.describe():
        buf.write(f"# {line}\n")
    buf.write(f"# git_revision={git_revision()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(rows)
    cells = [list(map(str, cols))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
    table = "\n".join("  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in cells)
    return buf.getvalue(), table


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ValueError, ConfigError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    try:
        cols, rows = COMMANDS[cfg.command](cfg)
    except ConnectionError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 1
    text, table = render(cfg, cols, rows)
    print(table)
    if args.out:
        args.out.write_text(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
