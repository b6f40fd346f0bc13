"""Independent reference models used by the tests.

None of these import the package's protocol or layout code; they restate
the rules from scratch so that agreement means something.
"""

from __future__ import annotations

import math
from functools import lru_cache

HDR = 16


# -- msgbuf layout ------------------------------------------------------------


def layout_regions(capacity: int, mtu: int) -> list[tuple[str, int, int]]:
    """(name, start, end) for every region of a msgbuf backing buffer:
    header 0, then the data, then headers 1..N-1."""
    n = max(1, math.ceil(capacity / mtu))
    regions = [("hdr0", 0, HDR), ("data", HDR, HDR + capacity)]
    off = HDR + capacity
    for i in range(1, n):
        regions.append((f"hdr{i}", off, off + HDR))
        off += HDR
    return regions


def walk_layout(m) -> list[str]:
    """Check a real msgbuf against the reference layout; returns problems."""
    problems = []
    regions = layout_regions(m.capacity, m.mtu_data)
    expect_len = regions[-1][2]
    if len(m.buf) != expect_len:
        problems.append(f"backing is {len(m.buf)} bytes, expected {expect_len}")
    # Walk byte ranges in order: no gaps, no overlap, full coverage.
    pos = 0
    for name, start, end in sorted(regions, key=lambda r: r[1]):
        if start != pos:
            problems.append(f"{name} starts at {start}, expected {pos}")
        pos = end
    if pos != len(m.buf):
        problems.append(f"regions cover {pos} of {len(m.buf)} bytes")
    for i in range(1, len(regions) - 1):
        name, start, _ = regions[i + 1]
        if m.hdr_offset(i) != start:
            problems.append(f"hdr{i} at {m.hdr_offset(i)}, expected {start}")
    if m.hdr_offset(0) + HDR != m.data_offset():
        problems.append("header 0 does not immediately precede the data")
    return problems


def segments(size: int, mtu: int) -> list[tuple[int, int]]:
    n = max(1, math.ceil(size / mtu))
    return [(i * mtu, min(mtu, size - i * mtu)) for i in range(n)]


# -- wire protocol enumeration ------------------------------------------------


def enumerate_wire_counts(nr: int, ns: int, credits: int) -> set[int]:
    """Total packets of one lossless RPC over every delivery interleaving.

    Each direction is a FIFO channel; at every step either channel head may
    be delivered next.  The client transmits greedily whenever it holds a
    credit and has something eligible to send.  Server rules: request packet
    i < nr-1 -> credit return; last request packet -> response 0; request
    for response j -> response j.
    """
    results: set[int] = set()

    def client_send(sent, got_resp, cr, c2s, total):
        while cr > 0:
            if sent < nr:
                pkt = ("req", sent)
            elif got_resp and sent - nr + 1 < ns:
                pkt = ("rfr", sent - nr + 1)
            else:
                break
            c2s = c2s + (pkt,)
            sent += 1
            cr -= 1
            total += 1
        return sent, cr, c2s, total

    @lru_cache(maxsize=None)
    def explore(sent, rcvd, got_resp, cr, c2s, s2c, total, server_rx, server_tx):
        if server_tx > server_rx:
            raise AssertionError("server sent a packet nobody asked for")
        if rcvd == nr - 1 + ns:
            results.add(total)
            return
        moved = False
        if c2s:
            kind, i = c2s[0]
            if kind == "req":
                reply = ("cr", i) if i < nr - 1 else ("resp", 0)
            else:
                reply = ("resp", i)
            explore(sent, rcvd, got_resp, cr, c2s[1:], s2c + (reply,), total + 1,
                    server_rx + 1, server_tx + 1)
            moved = True
        if s2c:
            kind, _ = s2c[0]
            g = got_resp or kind == "resp"
            s2, cr2, c2s2, t2 = client_send(sent, g, cr + 1, c2s, total)
            explore(s2, rcvd + 1, g, cr2, c2s2, s2c[1:], t2, server_rx, server_tx)
            moved = True
        if not moved:
            raise AssertionError(f"deadlock at sent={sent} rcvd={rcvd}")

    sent, cr, c2s, total = client_send(0, False, credits, (), 0)
    explore(sent, 0, False, cr, c2s, (), total, 0, 0)
    return results


def wire_count_formula(nr: int, ns: int) -> int:
    return nr + ns + (nr - 1) + (ns - 1)


# -- statistics ----------------------------------------------------------------


def binomial_band(n: int, p: float, sigmas: float = 3.0) -> tuple[float, float]:
    mean = n * p
    sd = math.sqrt(n * p * (1 - p))
    return mean - sigmas * sd, mean + sigmas * sd
