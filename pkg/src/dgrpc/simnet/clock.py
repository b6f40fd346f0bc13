from __future__ import annotations

import heapq


class VirtualClock:
    """Integer-nanosecond event scheduler.

    Events at the same instant run in the order they were scheduled, which
    is what makes a seeded run reproducible.
    """

    __slots__ = ("now", "_heap", "_seq", "events")

    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.events = 0

    def schedule(self, t: int, fn, arg=None) -> None:
        if t < self.now:
            t = self.now
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn, arg))

    def next_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def run_until(self, t: int) -> None:
        if t < self.now:
            raise ValueError(f"cannot run backwards: {t} < {self.now}")
        heap = self._heap
        pop = heapq.heappop
        n = 0
        while heap and heap[0][0] <= t:
            tt, _, fn, arg = pop(heap)
            self.now = tt
            fn(arg)
            n += 1
        self.events += n
        self.now = t

    def step(self) -> bool:
        """Run every event at the next pending instant; False when idle."""
        if not self._heap:
            return False
        self.run_until(self._heap[0][0])
        return True
