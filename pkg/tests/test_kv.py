from dgrpc.endpoint import Status
from dgrpc.kv import KvClient, KvServer, decode_put, encode_put, run_kv_demo
from dgrpc.simnet import SimConfig, build_topology


def test_put_codec():
    assert decode_put(encode_put(b"k", b"value")) == (b"k", b"value")
    assert decode_put(encode_put(b"", b"")) == (b"", b"")


def kv_pair():
    net = build_topology(SimConfig(), 2)
    server = KvServer(net.create_rpc(1))
    crpc = net.create_rpc(0)
    sess = crpc.create_session(server.rpc.local)
    net.run_until_true(lambda: sess.connected, 10_000_000)
    return net, server, KvClient(crpc, sess)


def wait(net, fn, *args):
    out = []
    fn(*args, lambda st, v: out.append((st, v)))
    net.run_until_true(lambda: out, 10_000_000)
    return out[0]


def test_get_put_scan():
    net, server, client = kv_pair()
    for k in (b"b", b"a", b"d", b"c"):
        assert wait(net, client.put, k, k * 3)[0] is Status.OK
    assert wait(net, client.get, b"c") == (Status.OK, b"ccc")
    assert wait(net, client.get, b"zz")[0] is Status.REMOTE_ERROR
    assert wait(net, client.scan, b"b", 2) == (Status.OK, [b"b", b"c"])
    assert wait(net, client.scan, b"x", 5) == (Status.OK, [])


def test_demo_runs_clean():
    r = run_kv_demo(build_topology(SimConfig(), 2), num_keys=100, num_ops=300, scan_every=10)
    assert r["ops"] == 300 and r["errors"] == 0 and r["loaded"] == 100
    assert r["scan_p50_us"] > r["get_p50_us"]
