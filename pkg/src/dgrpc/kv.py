"""A tiny in-memory key-value service.

GET and PUT are short and run inline on the dispatch thread; SCAN walks
the sorted key space and runs on a worker.

Wire formats (little-endian)::

    GET   req: key                          resp: value (error flag if missing)
    PUT   req: klen:u16 key value           resp: empty
    SCAN  req: count:u16 start_key          resp: (klen:u16 key)*
"""

from __future__ import annotations

import bisect
import struct

from .endpoint import HandlerMode, Rpc, Status

GET = 10
PUT = 11
SCAN = 12

_U16 = struct.Struct("<H")


def encode_put(key: bytes, value: bytes) -> bytes:
    return _U16.pack(len(key)) + key + value


def decode_put(data: bytes) -> tuple[bytes, bytes]:
    (klen,) = _U16.unpack_from(data)
    return bytes(data[2:2 + klen]), bytes(data[2 + klen:])


def encode_scan(start: bytes, count: int) -> bytes:
    return _U16.pack(count) + start


def decode_scan_resp(data: bytes) -> list[bytes]:
    keys, off = [], 0
    while off < len(data):
        (klen,) = _U16.unpack_from(data, off)
        keys.append(bytes(data[off + 2:off + 2 + klen]))
        off += 2 + klen
    return keys


class KvServer:
    def __init__(self, rpc: Rpc, scan_cost_ns: int = 50_000):
        self.rpc = rpc
        self.data: dict[bytes, bytes] = {}
        self.keys: list[bytes] = []
        rpc.register_handler(GET, self._get, HandlerMode.DISPATCH)
        rpc.register_handler(PUT, self._put, HandlerMode.DISPATCH)
        rpc.register_handler(SCAN, self._scan, HandlerMode.WORKER, sim_cost_ns=scan_cost_ns)

    def _get(self, h) -> None:
        value = self.data.get(bytes(h.request.data))
        if value is None:
            self.rpc.enqueue_response(h, h.alloc_response(0), error=True)
        else:
            h.respond(value)

    def _put(self, h) -> None:
        key, value = decode_put(h.request.data)
        if key not in self.data:
            bisect.insort(self.keys, key)
        self.data[key] = value
        h.respond(b"")

    def _scan(self, h) -> None:
        (count,) = _U16.unpack_from(h.request.data)
        start = bytes(h.request.data[2:])
        i = bisect.bisect_left(self.keys, start)
        out = b"".join(_U16.pack(len(k)) + k for k in self.keys[i:i + count])
        h.respond(out)


class KvClient:
    """Callback-style client; ``cb`` gets ``(status, payload bytes)``."""

    def __init__(self, rpc: Rpc, session):
        self.rpc = rpc
        self.session = session

    def _call(self, req_type: int, payload: bytes, cb, resp_size: int = 64) -> None:
        req = self.rpc.alloc_msgbuf(len(payload))
        req.set_data(payload)

        def done(c):
            cb(c.status, c.resp.tobytes() if c.resp is not None else b"")

        self.rpc.enqueue_request(self.session, req_type, req, done, self.rpc.alloc_msgbuf(resp_size))

    def get(self, key: bytes, cb) -> None:
        self._call(GET, key, cb)

    def put(self, key: bytes, value: bytes, cb) -> None:
        self._call(PUT, encode_put(key, value), cb)

    def scan(self, start: bytes, count: int, cb) -> None:
        self._call(SCAN, encode_scan(start, count), lambda st, b: cb(st, decode_scan_resp(b)))


def run_kv_demo(net, num_keys: int = 1000, num_ops: int = 5000, scan_every: int = 100,
                value_size: int = 32, seed: int = 1) -> dict:
    """Load ``num_keys`` keys, then run a closed-loop mix of GETs and SCANs."""
    import random

    from .simnet.scenarios import connect_all, percentile

    rng = random.Random(seed)
    server = KvServer(net.create_rpc(1))
    crpc = net.create_rpc(0)
    (sess,) = connect_all(net, [crpc], server.rpc)
    client = KvClient(crpc, sess)
    keys = [f"key{i:08d}".encode() for i in range(num_keys)]
    loaded = []
    for k in keys:
        client.put(k, bytes(rng.getrandbits(8) for _ in range(value_size)), lambda st, _: loaded.append(st))
    net.run_until_true(lambda: len(loaded) == num_keys, 10 * 10**9)

    lat = {"get": [], "scan": []}
    state = {"issued": 0, "done": 0, "errors": 0}
    t_start = net.now

    def issue():
        if state["issued"] >= num_ops:
            return
        state["issued"] += 1
        t0 = crpc.transport.now_ns()
        kind = "scan" if state["issued"] % scan_every == 0 else "get"

        def done(st, _):
            state["done"] += 1
            if st is not Status.OK:
                state["errors"] += 1
            lat[kind].append((crpc.transport.now_ns() - t0) / 1000.0)
            issue()

        if kind == "scan":
            client.scan(rng.choice(keys), 16, done)
        else:
            client.get(rng.choice(keys), done)

    for _ in range(8):
        issue()
    net.run_until_true(lambda: state["done"] >= num_ops, 60 * 10**9)
    elapsed = net.now - t_start
    return {
        "ops": state["done"], "errors": state["errors"],
        "ops_per_s": state["done"] / (elapsed / 1e9) if elapsed else 0.0,
        "get_p50_us": percentile(lat["get"], 50), "get_p99_us": percentile(lat["get"], 99),
        "scan_p50_us": percentile(lat["scan"], 50),
        "loaded": sum(1 for s in loaded if s is Status.OK),
    }
