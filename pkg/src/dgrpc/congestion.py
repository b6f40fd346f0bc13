"""RTT-gradient rate control, the timing-wheel rate limiter, and the
common-case shortcuts that keep both off the fast path.

Rates are in bits per second, RTTs in microseconds, times in nanoseconds.

Rate update, applied per RTT sample ``rtt`` (skipped entirely when the
Timely bypass applies)::

    diff      = rtt - prev_rtt              (0 for the first sample)
    avg_diff  = (1 - alpha) * avg_diff + alpha * diff
    rtt < t_low          -> rate + delta
    rtt > t_high         -> rate * (1 - beta * (1 - t_high / rtt))
    g = avg_diff / min_rtt
    g <= 0               -> rate + n * delta   (n = hai_mult once g <= 0 for
                                                hai_thresh samples in a row)
    g > 0                -> rate * (1 - beta * g)

and the result is clamped to ``[min_rate, link_rate]``.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field


@dataclass
class CongestionKnobs:
    link_rate: float = 25e9
    t_low_us: float = 50.0
    t_high_us: float = 1000.0
    ewma_alpha: float = 0.46
    beta: float = 0.26
    delta: float = 10e6
    min_rtt_us: float = 20.0
    hai_thresh: int = 5
    hai_mult: int = 5
    min_rate: float = 100e6
    enable_cc: bool = True
    timely_bypass: bool = True
    limiter_bypass: bool = True
    batched_timestamps: bool = True

    def __post_init__(self):
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError(f"ewma_alpha must be in (0, 1], got {self.ewma_alpha}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if not self.t_low_us < self.t_high_us:
            raise ValueError("t_low_us must be below t_high_us")
        if not 0 < self.min_rate <= self.link_rate:
            raise ValueError("need 0 < min_rate <= link_rate")


@dataclass
class TimelyState:
    knobs: CongestionKnobs
    rate: float = 0.0
    prev_rtt: float | None = None
    avg_rtt_diff: float = 0.0
    neg_gradient_run: int = 0
    last_update_ns: int = 0
    num_updates: int = 0

    def __post_init__(self):
        if self.rate == 0.0:
            self.rate = self.knobs.link_rate

    @property
    def uncongested(self) -> bool:
        return self.rate >= self.knobs.link_rate


def record_rtt_and_update(ts: TimelyState, rtt_us: float, now_ns: int = 0) -> float:
    """Feed one RTT sample; returns the (possibly unchanged) rate."""
    k = ts.knobs
    if rtt_us <= 0:
        raise ValueError(f"rtt sample must be positive, got {rtt_us}")
    if k.timely_bypass and ts.uncongested and rtt_us < k.t_low_us:
        return ts.rate

    diff = 0.0 if ts.prev_rtt is None else rtt_us - ts.prev_rtt
    ts.avg_rtt_diff = (1.0 - k.ewma_alpha) * ts.avg_rtt_diff + k.ewma_alpha * diff
    rate = ts.rate
    if rtt_us < k.t_low_us:
        new_rate = rate + k.delta
    elif rtt_us > k.t_high_us:
        new_rate = rate * (1.0 - k.beta * (1.0 - k.t_high_us / rtt_us))
    else:
        g = ts.avg_rtt_diff / k.min_rtt_us
        if g <= 0:
            ts.neg_gradient_run += 1
            n = k.hai_mult if ts.neg_gradient_run >= k.hai_thresh else 1
            new_rate = rate + n * k.delta
        else:
            ts.neg_gradient_run = 0
            new_rate = rate * (1.0 - k.beta * g)
    ts.rate = min(max(new_rate, k.min_rate), k.link_rate)
    ts.prev_rtt = rtt_us
    ts.last_update_ns = now_ns
    ts.num_updates += 1
    return ts.rate


@dataclass
class WheelEntry:
    item: object
    scheduled_ns: float | None
    size: int
    key: object = None


class RateLimiter:
    """Carousel-style timing wheel shared by all sessions of an endpoint.

    Future entries land in the bucket ``ceil(t / slot_width)`` and are only
    released by a poll at or after that bucket's time, so nothing leaves
    early.  Entries already due are released by the next poll.

    Paced sessions keep at most one packet on the wheel; the rest wait in a
    per-session FIFO and get their timestamp when the one ahead of them is
    released (Carousel's deferred completions).  A rate change therefore
    applies from the next packet on instead of after a backlog stamped
    with the old rate.
    """

    def __init__(self, slot_width_ns: int = 10_000, horizon_ns: int = 10_000_000):
        if slot_width_ns <= 0 or horizon_ns < slot_width_ns:
            raise ValueError("need 0 < slot_width_ns <= horizon_ns")
        self.slot_width_ns = slot_width_ns
        self.horizon_ns = horizon_ns
        self.next_send: dict[object, float] = {}
        self._buckets: dict[int, list[WheelEntry]] = {}
        self._heap: list[int] = []
        self._ready: list[WheelEntry] = []
        self._held: dict[object, deque] = {}
        self._state: dict[object, TimelyState] = {}
        self.pending = 0
        self.inserted = 0
        self.clamped = 0

    def __len__(self) -> int:
        return self.pending

    def holds(self, key) -> bool:
        """True while any packet of ``key`` is inside the limiter."""
        return key in self._held

    def insert(self, item, scheduled_ns: float, now_ns: int, size: int = 0, key=None) -> float:
        if scheduled_ns - now_ns >= self.horizon_ns:
            scheduled_ns = now_ns + self.horizon_ns - self.slot_width_ns
            self.clamped += 1
        entry = WheelEntry(item, scheduled_ns, size, key)
        self.pending += 1
        self.inserted += 1
        if scheduled_ns <= now_ns:
            self._ready.append(entry)
            return scheduled_ns
        b = math.ceil(scheduled_ns / self.slot_width_ns)
        bucket = self._buckets.get(b)
        if bucket is None:
            self._buckets[b] = [entry]
            heapq.heappush(self._heap, b)
        else:
            bucket.append(entry)
        return scheduled_ns

    def enqueue(self, key, ts: TimelyState, item, size: int, now_ns: int) -> float:
        """Pace ``item`` at ``ts.rate`` behind the session's earlier packets."""
        self._state[key] = ts
        held = self._held.get(key)
        if held is not None:
            held.append(WheelEntry(item, None, size, key))
            self.pending += 1
            return self.next_send[key]
        self._held[key] = deque()
        return self._stamp(key, item, size, now_ns)

    def _stamp(self, key, item, size: int, now_ns: int) -> float:
        # An idle session may not bank more than one slot of sending credit.
        start = max(self.next_send.get(key, now_ns), now_ns - self.slot_width_ns)
        self.next_send[key] = start + size * 8e9 / self._state[key].rate
        return self.insert(item, start, now_ns, size, key)

    def _advance(self, key, now_ns: int) -> None:
        held = self._held.get(key)
        if held is None:
            return
        if not held:
            del self._held[key]
            return
        e = held.popleft()
        self.pending -= 1
        self._stamp(key, e.item, e.size, now_ns)

    def next_due_ns(self) -> int | None:
        if self._ready:
            return 0
        if self._heap:
            return self._heap[0] * self.slot_width_ns
        return None

    def poll(self, now_ns: int) -> list[WheelEntry]:
        out: list[WheelEntry] = []
        heap = self._heap
        limit = now_ns // self.slot_width_ns
        batch: list[WheelEntry] = []
        while heap and heap[0] <= limit:
            batch.extend(self._buckets.pop(heapq.heappop(heap)))
        batch.extend(self._ready)
        self._ready = []
        while batch:
            for e in batch:
                out.append(e)
                if e.key is not None:
                    self._advance(e.key, now_ns)
            batch = self._ready
            self._ready = []
        self.pending -= len(out)
        return out

    def drain_all(self) -> list[WheelEntry]:
        out: list[WheelEntry] = []
        while self._heap:
            out.extend(self._buckets.pop(heapq.heappop(self._heap)))
        out.extend(self._ready)
        self._ready = []
        for held in self._held.values():
            out.extend(held)
        self._held.clear()
        self.pending = 0
        return out


def schedule_or_bypass(limiter: RateLimiter, key, ts: TimelyState, item, size_bytes: int,
                       now_ns: int) -> float | None:
    """``None`` means transmit now; otherwise the entry's scheduled time.

    A session that still has packets in the limiter never bypasses it, so
    its packets leave in order."""
    k = ts.knobs
    if not k.enable_cc or (k.limiter_bypass and ts.uncongested and not limiter.holds(key)):
        return None
    return limiter.enqueue(key, ts, item, size_bytes, now_ns)


def poll_wheel(limiter: RateLimiter, now_ns: int) -> list[WheelEntry]:
    return limiter.poll(now_ns)


def drop_response_if_retransmit_queued(req_msgbuf) -> bool:
    """A response must be dropped while any copy of the request still sits
    in the wheel: the continuation would hand the msgbuf back to the
    application while the wheel still points at it."""
    return req_msgbuf is not None and req_msgbuf.wheel_refs > 0


@dataclass
class RttClock:
    """Timestamps for RTT measurement.

    With batching, one clock read per RX/TX batch is shared by every packet
    in it; otherwise every packet reads the clock (and pays for it).
    """

    now_fn: object
    batched: bool = True
    reads: int = 0
    _batch_ts: int = field(default=0, repr=False)

    def batch_timestamp(self) -> int:
        self.reads += 1
        self._batch_ts = self.now_fn()
        return self._batch_ts

    def stamp(self) -> int:
        if self.batched:
            return self._batch_ts
        self.reads += 1
        return self.now_fn()
