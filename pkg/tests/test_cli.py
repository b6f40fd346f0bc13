import pytest

from dgrpc.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def test_latency_writes_header_and_csv(tmp_path, capsys):
    out = tmp_path / "lat.csv"
    code, cap = run(capsys, "latency", "--num", "200", "--out", str(out))
    assert code == 0
    text = out.read_text()
    header = [ln for ln in text.splitlines() if ln.startswith("#")]
    assert "# command=latency" in header and "# seed=1" in header
    assert any(ln.startswith("# git_revision=") for ln in header)
    assert any(ln.startswith("# sim.link_gbps=") for ln in header)
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert "p50_us" in body[0].split(",")
    assert "p50_us" in cap.out


def test_same_seed_same_csv(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run(capsys, "latency", "--num", "300", "--loss", "0.01", "--seed", "3", "--out", str(p))[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_config_file_is_used(tmp_path, capsys):
    cfg = tmp_path / "topo.cfg"
    cfg.write_text("link_gbps = 10\n")
    out = tmp_path / "o.csv"
    assert run(capsys, "latency", "--num", "50", "--config", str(cfg), "--out", str(out))[0] == 0
    assert "# sim.link_gbps=10.0" in out.read_text()


@pytest.mark.parametrize("argv", [
    ["latency", "--loss", "1.5"],
    ["latency", "--batch", "0"],
    ["rate", "--transport", "udp"],
    ["incast", "--fan-in", "0"],
    ["latency", "--size", "0"],
])
def test_invalid_arguments(argv, capsys):
    code, cap = run(capsys, *argv)
    assert code == 2 and "bench:" in cap.err


def test_unknown_command_exits(capsys):
    with pytest.raises(SystemExit):
        main(["teleport"])


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp = 9\n")
    assert run(capsys, "latency", "--config", str(cfg))[0] == 2


def rate_rows(capsys, tmp_path, *extra):
    out = tmp_path / "rate.csv"
    assert run(capsys, "rate", "--nodes", "3", "--duration-ms", "0.5", "--out", str(out), *extra)[0] == 0
    rows = [ln.split(",") for ln in out.read_text().splitlines() if not ln.startswith("#")]
    return {r[0]: float(r[3]) for r in rows[1:]}


def test_rate_factor_analysis(tmp_path, capsys):
    rates = rate_rows(capsys, tmp_path)
    assert list(rates)[0] == "baseline"
    assert len(rates) == 6
    # These two only add CPU work per packet, so each step is no faster.
    assert rates["-prealloc"] <= rates["-limiter_bypass"]
    assert rates["-zerocopy_rx"] <= rates["-prealloc"]


def test_incast_and_bandwidth_and_kv(tmp_path, capsys):
    code, cap = run(capsys, "incast", "--fan-in", "2", "--size", "65536", "--duration-ms", "1")
    assert code == 0 and "bw_gbps" in cap.out
    code, cap = run(capsys, "bandwidth", "--loss", "0,0.001", "--size", "65536", "--num", "2")
    assert code == 0 and "goodput_gbps" in cap.out
    code, cap = run(capsys, "kv", "--num", "200")
    assert code == 0 and "scan_p50_us" in cap.out
