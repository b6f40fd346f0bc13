import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgrpc.congestion import (CongestionKnobs, RateLimiter, RttClock, TimelyState,
                              drop_response_if_retransmit_queued, poll_wheel, record_rtt_and_update,
                              schedule_or_bypass)
from dgrpc.msgbuf import alloc_msgbuf

from timely_vectors import VECTORS


@pytest.mark.parametrize("name,over,rate,rtts,expected,updates", VECTORS, ids=[v[0] for v in VECTORS])
def test_timely_hand_vectors(name, over, rate, rtts, expected, updates):
    ts = TimelyState(CongestionKnobs(**over), rate=rate)
    for i, rtt in enumerate(rtts):
        record_rtt_and_update(ts, rtt, i * 1000)
    assert math.isclose(ts.rate, expected, rel_tol=1e-9, abs_tol=0)
    assert ts.num_updates == updates


def test_bypass_leaves_state_untouched():
    ts = TimelyState(CongestionKnobs())
    before = (ts.rate, ts.prev_rtt, ts.avg_rtt_diff, ts.last_update_ns)
    record_rtt_and_update(ts, 40.0, 123)
    assert (ts.rate, ts.prev_rtt, ts.avg_rtt_diff, ts.last_update_ns) == before


def test_bypass_disabled_updates_state():
    ts = TimelyState(CongestionKnobs(timely_bypass=False))
    record_rtt_and_update(ts, 40.0, 123)
    assert ts.num_updates == 1 and ts.prev_rtt == 40.0


@pytest.mark.parametrize("bad", [dict(ewma_alpha=0), dict(beta=1.0), dict(t_low_us=2000)])
def test_knob_validation(bad):
    with pytest.raises(ValueError):
        CongestionKnobs(**bad)


def test_nonpositive_rtt_rejected():
    with pytest.raises(ValueError):
        record_rtt_and_update(TimelyState(CongestionKnobs()), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.5, 50_000), min_size=1, max_size=60), st.floats(100e6, 25e9))
def test_rate_stays_in_bounds(rtts, start):
    k = CongestionKnobs()
    ts = TimelyState(k, rate=start)
    for rtt in rtts:
        r = record_rtt_and_update(ts, rtt)
        assert k.min_rate <= r <= k.link_rate


# -- timing wheel ----------------------------------------------------------------


def test_empty_wheel_releases_nothing():
    assert poll_wheel(RateLimiter(), 10**9) == []


def test_slot_rounding_releases_at_next_slot_boundary():
    w = RateLimiter(slot_width_ns=10_000)
    w.insert("p", 25_000, now_ns=0)
    # Oracle: the entry sits in bucket ceil(25/10) and leaves at 30 us.
    release = math.ceil(25_000 / 10_000) * 10_000
    assert release == 30_000
    assert w.poll(29_999) == []
    assert [e.item for e in w.poll(release)] == ["p"]
    assert len(w) == 0


def test_due_entries_leave_on_next_poll():
    w = RateLimiter()
    w.insert("now", 100, now_ns=100)
    assert [e.item for e in w.poll(100)] == ["now"]


def test_no_early_release_random():
    rng = random.Random(3)
    w = RateLimiter(slot_width_ns=10_000, horizon_ns=10_000_000)
    sched = {}
    for i in range(2000):
        t = rng.randrange(0, 5_000_000)
        sched[i] = w.insert(i, t, now_ns=0)
    early = 0
    released = 0
    for now in range(0, 6_000_000, 3_333):
        for e in w.poll(now):
            early += now < sched[e.item]
            released += 1
    assert early == 0 and released == 2000


def test_beyond_horizon_is_clamped_and_counted():
    w = RateLimiter(slot_width_ns=10_000, horizon_ns=1_000_000)
    t = w.insert("far", 5_000_000, now_ns=0)
    assert t < 1_000_000
    assert w.clamped == 1


def paced_run(rates, size, duration_ns, poll_ns=1_000, slot_ns=10_000):
    """Keep every session backlogged and count releases per session."""
    w = RateLimiter(slot_width_ns=slot_ns)
    states = {k: TimelyState(CongestionKnobs(), rate=r) for k, r in rates.items()}
    sched = {}
    counts = {k: 0 for k in rates}
    seq = 0
    early = 0
    for k in rates:
        for _ in range(4):
            seq += 1
            w.enqueue(k, states[k], seq, size, 0)
    for now in range(0, duration_ns + 1, poll_ns):
        for e in w.poll(now):
            # The wheel's own stamp is the earliest allowed release time.
            early += e.scheduled_ns is not None and now < e.scheduled_ns
            counts[e.key] += 1
            seq += 1
            w.enqueue(e.key, states[e.key], seq, size, now)
    return counts, early, sched


def test_two_sessions_at_r_and_2r():
    r = 1e9
    size = 1000
    counts, early, _ = paced_run({"slow": r, "fast": 2 * r}, size, 10_000_000)
    per_slot_fast = 2 * r * 10e-6 / (size * 8)
    assert early == 0
    assert abs(counts["fast"] - 2 * counts["slow"]) <= 2 * per_slot_fast + 2


def test_pacing_within_ten_percent_over_100ms():
    r = 2e9
    size = 1024
    counts, early, _ = paced_run({"s": r}, size, 100_000_000, poll_ns=5_000)
    achieved = counts["s"] * size * 8 / 0.1
    assert early == 0
    assert 0.9 * r <= achieved <= 1.1 * r


def test_rate_change_applies_to_next_packet():
    w = RateLimiter()
    ts = TimelyState(CongestionKnobs(), rate=1e9)
    t0 = w.enqueue("s", ts, "a", 1250, 0)
    w.enqueue("s", ts, "b", 1250, 0)
    ts.rate = 0.5e9
    assert t0 == 0
    w.poll(0)
    # 'a' took 10 us at 1 Gbit/s; 'b' now goes out at 10 us and pushes the next send 20 us on.
    assert w.next_send["s"] == pytest.approx(10_000 + 20_000)


def test_schedule_or_bypass():
    w = RateLimiter()
    k = CongestionKnobs()
    ts = TimelyState(k)
    assert schedule_or_bypass(w, 1, ts, "p", 100, 0) is None
    ts.rate = 1e9
    assert schedule_or_bypass(w, 1, ts, "p", 100, 0) is not None
    ts.rate = k.link_rate
    # Still holding a packet of this session: no overtaking.
    assert w.holds(1)
    assert schedule_or_bypass(w, 1, ts, "q", 100, 0) is not None
    off = TimelyState(CongestionKnobs(enable_cc=False), rate=1e9)
    assert schedule_or_bypass(w, 2, off, "p", 100, 0) is None
    no_bypass = TimelyState(CongestionKnobs(limiter_bypass=False))
    assert schedule_or_bypass(w, 3, no_bypass, "p", 100, 0) is not None


def test_drain_all_returns_held_packets():
    w = RateLimiter()
    ts = TimelyState(CongestionKnobs(), rate=1e8)
    for i in range(5):
        w.enqueue("s", ts, i, 1000, 0)
    w.insert("x", 50_000, 0)
    assert sorted(str(e.item) for e in w.drain_all()) == ["0", "1", "2", "3", "4", "x"]
    assert len(w) == 0 and not w.holds("s")


def test_response_drop_while_retransmission_is_queued():
    m = alloc_msgbuf(100, 100)
    assert not drop_response_if_retransmit_queued(m)
    m.wheel_refs = 1
    assert drop_response_if_retransmit_queued(m)
    assert not drop_response_if_retransmit_queued(None)


def test_batched_timestamps_share_one_read():
    t = [0]

    def now():
        t[0] += 7
        return t[0]

    batched = RttClock(now, batched=True)
    ts = batched.batch_timestamp()
    assert [batched.stamp() for _ in range(5)] == [ts] * 5
    assert batched.reads == 1
    each = RttClock(now, batched=False)
    each.batch_timestamp()
    stamps = [each.stamp() for _ in range(5)]
    assert len(set(stamps)) == 5 and each.reads == 6
