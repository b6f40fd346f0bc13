from collections import Counter

import pytest

from dgrpc.congestion import CongestionKnobs
from dgrpc.endpoint import HandlerMode, RpcError, Status
from dgrpc.msgbuf import OwnershipError
from dgrpc.simnet import SimConfig, build_topology
from dgrpc.transport.base import CpuModel

from simhelp import ECHO, call, echo, pair, rpc_config

SLOW = 2


def one_packet_iteration_ns(cpu=CpuModel()):
    """Event-loop time the server spends turning one request packet around."""
    return cpu.loop_ns + cpu.rx_pkt_ns + cpu.handler_ns + cpu.tx_pkt_ns + cpu.timestamp_ns


def dispatch_latencies_during_slow_handler(mode):
    net, server, client, sess = pair(handlers={ECHO: echo, SLOW: (echo, mode, 10_000_000)})
    base = call(net, client, sess, b"x" * 32).latency_ns
    slow = []
    m = client.alloc_msgbuf(8)
    m.set_data(b"s" * 8)
    client.enqueue_request(sess, SLOW, m, slow.append)
    net.run_for(100_000)
    lats = [call(net, client, sess, b"x" * 32).latency_ns for _ in range(10)]
    net.run_until_true(lambda: slow, 100_000_000)
    assert slow[0].ok
    return base, lats


def test_worker_handler_does_not_delay_dispatch_rpcs():
    base, lats = dispatch_latencies_during_slow_handler(HandlerMode.WORKER)
    assert max(lats) - base < 2 * one_packet_iteration_ns()


def test_same_handler_in_dispatch_mode_blocks_the_loop():
    base, lats = dispatch_latencies_during_slow_handler(HandlerMode.DISPATCH)
    assert lats[0] - base > 5_000_000


def test_nested_rpc_responds_from_continuation():
    net = build_topology(SimConfig(), 3)
    cfg = rpc_config()
    backend = net.create_rpc(2, config=cfg)
    backend.register_handler(ECHO, lambda h: h.respond(bytes(h.request.data)[::-1]))
    mid = net.create_rpc(1, config=cfg)
    down = mid.create_session(backend.local)

    def forward(h):
        m = mid.alloc_msgbuf(h.request.data_size)
        m.set_data(bytes(h.request.data))
        mid.enqueue_request(down, ECHO, m, lambda c: h.respond(b"via:" + bytes(c.resp.data)))

    mid.register_handler(ECHO, forward)
    client = net.create_rpc(0, config=cfg)
    up = client.create_session(mid.local)
    assert net.run_until_true(lambda: up.connected and down.connected, 10_000_000)
    r = call(net, client, up, b"abc")
    assert r.ok and bytes(r.resp.data) == b"via:cba"


def test_duplicate_handler_registration_rejected():
    net, server, client, sess = pair()
    with pytest.raises(RpcError):
        server.register_handler(ECHO, echo)
    with pytest.raises(ValueError):
        server.register_handler(300, echo)


def test_second_response_raises():
    seen = []

    def twice(h):
        h.respond(b"a")
        try:
            h.respond(b"b")
        except RpcError as e:
            seen.append(e)

    net, server, client, sess = pair(handlers={ECHO: twice})
    assert call(net, client, sess, b"x").ok
    assert len(seen) == 1


def test_request_buffer_is_read_only_while_in_flight():
    net, server, client, sess = pair()
    m = client.alloc_msgbuf(64)
    m.set_data(bytes(64))
    done = []
    client.enqueue_request(sess, ECHO, m, done.append)
    with pytest.raises(OwnershipError):
        m.set_data(b"y" * 64)
    net.run_until_true(lambda: done, 10_000_000)
    m.set_data(b"z" * 64)


def test_handler_exception_becomes_remote_error():
    def boom(h):
        raise KeyError("nope")

    net, server, client, sess = pair(handlers={ECHO: boom})
    assert call(net, client, sess, b"x").status is Status.REMOTE_ERROR


def test_request_timeout():
    net, server, client, sess = pair(handlers={ECHO: (echo, HandlerMode.WORKER, 50_000_000)},
                                     request_timeout_ns=2_000_000)
    assert call(net, client, sess, b"x").status is Status.TIMEOUT


# -- node failure -------------------------------------------------------------------


def fail_mid_flight(**cfg):
    net, server, client, sess = pair(mtu_data=1024, **cfg)
    if sess.timely is not None:
        sess.timely.rate = 200e6
    done = []
    for i in range(12):
        m = client.alloc_msgbuf(8000)
        m.set_data(bytes([i]) * 8000)
        client.enqueue_request(sess, ECHO, m, done.append, tag=i)
    net.run_for(200_000)
    queued = len(client.limiter)
    net.kill_host(1)
    client.handle_node_failure(server.local)
    net.run_for(50_000_000)
    return client, done, queued


def test_node_failure_fires_each_continuation_once():
    client, done, _ = fail_mid_flight()
    assert Counter(c.tag for c in done) == Counter(range(12))
    assert {c.status for c in done} == {Status.NODE_FAILURE}
    assert client.stats.audit_violations == 0


def test_node_failure_with_packets_in_the_rate_limiter():
    client, done, queued = fail_mid_flight(knobs=CongestionKnobs(limiter_bypass=False))
    assert queued > 0
    assert Counter(c.tag for c in done) == Counter(range(12))
    assert {c.status for c in done} == {Status.NODE_FAILURE}
    assert client.stats.audit_violations == 0
    assert len(client.limiter) == 0
    # Every request buffer is back with the application.
    for c in done:
        c.req.set_data(b"ok")


def test_heartbeat_timeout_detects_dead_peer():
    net, server, client, sess = pair(heartbeats=True, heartbeat_ns=1_000_000, failure_timeout_ns=5_000_000)
    done = []
    m = client.alloc_msgbuf(16)
    m.set_data(bytes(16))
    net.kill_host(1)
    client.enqueue_request(sess, ECHO, m, done.append)
    net.run_for(20_000_000)
    assert [c.status for c in done] == [Status.NODE_FAILURE]
    assert client.stats.node_failures == 1


def test_false_positive_under_pacing_drops_response_and_recovers():
    # Pacing holds the retransmission in the wheel while the slow original
    # response arrives; that response must be dropped, not delivered.
    net, server, client, sess = pair(handlers={ECHO: (echo, HandlerMode.WORKER, 25_000)},
                                     knobs=CongestionKnobs(limiter_bypass=False),
                                     rto_ns=20_000, rto_scan_ns=2_000)
    for i in range(20):
        sess.timely.rate = 200e6
        r = call(net, client, sess, bytes([i]) * 1000)
        assert r.ok and bytes(r.resp.data) == bytes([i]) * 1000
    assert client.stats.retx_queued_drops >= 20
    assert server.stats.handlers_run == 20
    assert client.stats.audit_violations == 0
