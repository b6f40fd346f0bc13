"""Sessions, slots and session credits."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

DEFAULT_CREDITS = 8
DEFAULT_NUM_SLOTS = 8


class SessionError(RuntimeError):
    pass


class Role(enum.Enum):
    CLIENT = "client"
    SERVER = "server"


class SessionState(enum.Enum):
    CONNECTING = "connecting"
    CONNECTED = "connected"
    FAILED = "failed"


class SlotState(enum.Enum):
    FREE = "free"
    SENDING_REQ = "sending_req"
    AWAITING_RESP = "awaiting_resp"
    SENDING_RFRS = "sending_rfrs"
    DONE = "done"


class SSlot:
    """Per-request bookkeeping.

    Client slots count packets in one sequence shared by request packets and
    RFRs: client packet ``i < req_pkts`` is request packet ``i``, client
    packet ``req_pkts + j - 1`` is the RFR for response packet ``j``.  Every
    client packet draws exactly one server packet (CR, or a response packet),
    so ``num_tx - num_rx`` is the slot's share of the session's in-flight
    credits.
    """

    __slots__ = (
        "index", "req_num", "state",
        # client
        "req_msgbuf", "resp_msgbuf", "req_type", "cont", "tag",
        "req_pkts", "resp_pkts", "num_tx", "num_rx", "tx_ts", "rto_deadline",
        "retransmissions", "stalled", "failing", "enqueue_ns", "high_tx",
        # server
        "server_req_num", "rx_msgbuf", "rx_pkts_done", "handle", "responded",
        "resp_buf", "prealloc", "executed", "resp_error",
    )

    def __init__(self, index: int):
        self.index = index
        self.req_num = index
        self.state = SlotState.FREE
        self.req_msgbuf = None
        self.resp_msgbuf = None
        self.req_type = 0
        self.cont = None
        self.tag = None
        self.req_pkts = 0
        self.resp_pkts = 0
        self.num_tx = 0
        self.num_rx = 0
        self.tx_ts: dict[int, int] = {}
        self.rto_deadline = 0
        self.retransmissions = 0
        self.stalled = False
        self.failing = False
        self.enqueue_ns = 0
        self.high_tx = 0
        self.server_req_num = -1
        self.rx_msgbuf = None
        self.rx_pkts_done = 0
        self.handle = None
        self.responded = False
        self.resp_buf = None
        self.prealloc = None
        self.executed = 0
        self.resp_error = False

    @property
    def in_flight(self) -> int:
        return self.num_tx - self.num_rx

    @property
    def req_pkts_sent(self) -> int:
        return min(self.num_tx, self.req_pkts)

    @property
    def rfrs_sent(self) -> int:
        return max(0, self.num_tx - self.req_pkts)

    @property
    def crs_received(self) -> int:
        return min(self.num_rx, self.req_pkts - 1)

    @property
    def resp_pkts_received(self) -> int:
        return max(0, self.num_rx - (self.req_pkts - 1))

    @property
    def total_client_pkts(self) -> int:
        """Client packets this RPC needs; only known once the response size is."""
        return self.req_pkts + max(self.resp_pkts, 1) - 1

    def __repr__(self) -> str:
        return (f"SSlot({self.index}, req_num={self.req_num}, {self.state.value}, "
                f"tx={self.num_tx}, rx={self.num_rx})")


@dataclass
class PendingRequest:
    req_type: int
    req_msgbuf: object
    resp_msgbuf: object
    cont: object
    tag: object = None
    enqueue_ns: int = 0


@dataclass(eq=False)
class Session:
    role: Role
    session_num: int
    remote: object
    credits: int = DEFAULT_CREDITS
    num_slots: int = DEFAULT_NUM_SLOTS
    remote_session_num: int = -1
    state: SessionState = SessionState.CONNECTING
    credits_available: int = -1
    slots: list[SSlot] = field(default_factory=list)
    backlog: deque = field(default_factory=deque)
    stall_queue: deque = field(default_factory=deque)
    timely: object = None
    mtu_data: int = 0

    def __post_init__(self):
        if self.credits < 1:
            raise SessionError(f"credits must be >= 1, got {self.credits}")
        if self.num_slots < 1:
            raise SessionError(f"num_slots must be >= 1, got {self.num_slots}")
        if self.credits_available < 0:
            self.credits_available = self.credits
        if not self.slots:
            self.slots = [SSlot(i) for i in range(self.num_slots)]

    @property
    def is_client(self) -> bool:
        return self.role is Role.CLIENT

    @property
    def connected(self) -> bool:
        return self.state is SessionState.CONNECTED

    def in_flight(self) -> int:
        return sum(s.num_tx - s.num_rx for s in self.slots if s.state is not SlotState.FREE)

    def check_credits(self) -> None:
        """Raises AssertionError if the credit invariant is broken."""
        assert 0 <= self.credits_available <= self.credits, self.credits_available
        assert self.in_flight() + self.credits_available == self.credits, (
            self.in_flight(), self.credits_available, self.credits)

    def free_slot(self) -> SSlot | None:
        for s in self.slots:
            if s.state is SlotState.FREE:
                return s
        return None

    def active_slots(self) -> list[SSlot]:
        return [s for s in self.slots if s.state is not SlotState.FREE]


def consume_credit(s: Session) -> None:
    if s.credits_available < 1:
        raise SessionError("no credits available; transmission must be deferred")
    s.credits_available -= 1


def replenish_credit(s: Session, n: int = 1) -> None:
    if s.credits_available + n > s.credits:
        raise SessionError(f"credit overflow: {s.credits_available} + {n} > {s.credits}")
    s.credits_available += n


def enqueue_backlog(s: Session, req: PendingRequest) -> None:
    s.backlog.append(req)


def drain_backlog(s: Session):
    """Yield (slot, request) pairs, oldest request first, while slots are free."""
    while s.backlog:
        slot = s.free_slot()
        if slot is None:
            return
        yield slot, s.backlog.popleft()


class CreditBudget:
    """An endpoint may commit at most ``rq_size`` credits across all of its
    client- and server-mode sessions, so that a burst from every peer fits
    in the receive queue."""

    def __init__(self, rq_size: int):
        self.rq_size = rq_size
        self.committed = 0

    def max_sessions(self, credits: int) -> int:
        return self.rq_size // credits

    def reserve(self, credits: int) -> None:
        if self.committed + credits > self.rq_size:
            raise SessionError(
                f"receive queue budget exhausted: {self.committed} + {credits} > {self.rq_size}")
        self.committed += credits

    def release(self, credits: int) -> None:
        self.committed -= credits
