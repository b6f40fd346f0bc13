"""The RPC endpoint: one per thread, driven by its own event loop."""

from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import mgmt
from .congestion import (CongestionKnobs, RateLimiter, RttClock, TimelyState,
                         drop_response_if_retransmit_queued, poll_wheel, record_rtt_and_update,
                         schedule_or_bypass)
from .msgbuf import (DEFAULT_MTU_DATA, FLAG_ERROR, HDR_SIZE, CodecError, MsgBuf, PktType,
                     alloc_msgbuf, unpack_header_from)
from .protocol import (ProtocolError, TxPkt, Verdict, client_accept, client_done,
                       client_has_pending_tx, client_on_first_response, client_tx_step,
                       detect_loss_and_rollback, drop_reordered, reassemble, server_pkt_index,
                       server_resp_pkt, server_rfr_step, server_rx_step)
from .session import (CreditBudget, PendingRequest, Role, Session, SessionError, SessionState,
                      SlotState, drain_backlog, enqueue_backlog)

log = logging.getLogger(__name__)


class RpcError(RuntimeError):
    pass


class Status(enum.Enum):
    OK = "ok"
    NODE_FAILURE = "node_failure"
    TIMEOUT = "timeout"
    REMOTE_ERROR = "remote_error"
    SESSION_ERROR = "session_error"


class HandlerMode(enum.Enum):
    DISPATCH = "dispatch"
    WORKER = "worker"


@dataclass
class RpcConfig:
    credits: int = 8
    num_slots: int = 8
    mtu_data: int = DEFAULT_MTU_DATA
    rq_size: int = 4096
    rx_batch: int = 32
    knobs: CongestionKnobs = field(default_factory=CongestionKnobs)
    slot_width_ns: int = 10_000
    horizon_ns: int = 10_000_000
    rto_ns: int = 5_000_000
    rto_scan_ns: int = 500_000
    request_timeout_ns: int | None = None
    heartbeats: bool = True
    heartbeat_ns: int = 100_000_000
    failure_timeout_ns: int = 500_000_000
    connect_retry_ns: int = 10_000_000
    mgmt_poll_ns: int = 100_000
    prealloc_responses: bool = True
    zerocopy_rx: bool = True
    num_workers: int = 2
    debug: bool = True
    record_rtts: bool = False

    def __post_init__(self):
        if self.rx_batch < 1:
            raise ValueError("rx_batch must be >= 1")
        if self.rto_ns <= 0 or self.rto_scan_ns <= 0:
            raise ValueError("RTO and scan period must be positive")


@dataclass
class Completion:
    """What a continuation receives.  Ownership of ``req`` (and ``resp``)
    is back with the application."""

    status: Status
    req: MsgBuf
    resp: MsgBuf | None
    tag: object = None
    latency_ns: int = 0

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


@dataclass
class _Handler:
    fn: object
    mode: HandlerMode
    sim_cost_ns: int | None


class ReqHandle:
    """Server-side view of one request, valid until it has been responded to."""

    __slots__ = ("rpc", "session", "slot", "req_num", "req_type", "request", "mode",
                 "responded", "borrowed")

    def __init__(self, rpc, session, slot, req_num, req_type, request, mode, borrowed):
        self.rpc = rpc
        self.session = session
        self.slot = slot
        self.req_num = req_num
        self.req_type = req_type
        self.request = request
        self.mode = mode
        self.responded = False
        self.borrowed = borrowed

    def alloc_response(self, size: int) -> MsgBuf:
        """A buffer for the response, using the slot's preallocated one when
        it fits in one packet and preallocation is on."""
        return self.rpc._alloc_response(self, size)

    def respond(self, payload) -> None:
        m = self.alloc_response(len(payload))
        m.set_data(payload)
        self.rpc.enqueue_response(self, m)


@dataclass
class EndpointStats:
    rx_pkts: int = 0
    tx_pkts: int = 0
    iterations: int = 0
    retransmissions: int = 0
    reorder_drops: int = 0
    stale_drops: int = 0
    retx_queued_drops: int = 0
    unknown_session_drops: int = 0
    codec_drops: int = 0
    protocol_errors: int = 0
    handlers_run: int = 0
    continuations: int = 0
    audit_violations: int = 0
    timely_updates: int = 0
    wheel_inserts: int = 0
    flushes: int = 0
    node_failures: int = 0
    rtt_ns: list = field(default_factory=list)


# -- worker pools ---------------------------------------------------------------


class SimWorkerPool:
    """Workers on virtual time: a handler runs immediately, but whatever it
    responds with only becomes visible to the event loop once ``cost`` of
    worker-core time has elapsed."""

    def __init__(self, rpc, num_workers: int):
        self.rpc = rpc
        self.free_at = [0] * max(1, num_workers)
        self.current_ready: int | None = None

    def submit(self, handle: ReqHandle, fn, cost_ns: int) -> None:
        now = self.rpc.transport.now_ns()
        i = min(range(len(self.free_at)), key=self.free_at.__getitem__)
        start = max(now, self.free_at[i])
        ready = start + cost_ns
        self.free_at[i] = ready
        self.current_ready = ready
        try:
            fn(handle)
        except Exception:
            log.exception("worker handler for req_type %d raised", handle.req_type)
            if not handle.responded:
                self.rpc._respond_error(handle)
        finally:
            self.current_ready = None

    def in_worker(self) -> bool:
        return self.current_ready is not None

    def close(self) -> None:
        pass


class ThreadWorkerPool:
    def __init__(self, rpc, num_workers: int):
        self.rpc = rpc
        self.pool = ThreadPoolExecutor(max_workers=max(1, num_workers), thread_name_prefix="rpc-worker")
        self._local = threading.local()

    def submit(self, handle: ReqHandle, fn, cost_ns: int) -> None:
        self.pool.submit(self._run, handle, fn)

    def _run(self, handle, fn):
        self._local.active = True
        try:
            fn(handle)
        except Exception:
            log.exception("worker handler for req_type %d raised", handle.req_type)
            if not handle.responded:
                self.rpc._respond_error(handle)
        finally:
            self._local.active = False

    def in_worker(self) -> bool:
        return getattr(self._local, "active", False)

    @property
    def current_ready(self) -> int:
        return 0

    def close(self) -> None:
        self.pool.shutdown(wait=True)


# -- the endpoint ------------------------------------------------------------------


class Rpc:
    def __init__(self, transport, config: RpcConfig | None = None, *, name: str = ""):
        self.transport = transport
        self.cfg = config or RpcConfig()
        self.name = name or str(transport.local)
        self.local = transport.local
        self.cpu = transport.cpu
        self.stats = EndpointStats()
        self.sessions: list[Session | None] = []
        self._server_sessions: dict[tuple, Session] = {}
        self._handlers: dict[int, _Handler] = {}
        self.budget = CreditBudget(self.cfg.rq_size)
        self.limiter = RateLimiter(self.cfg.slot_width_ns, self.cfg.horizon_ns)
        self.rx_clock = RttClock(transport.now_ns, self.cfg.knobs.batched_timestamps)
        self.tx_clock = RttClock(transport.now_ns, self.cfg.knobs.batched_timestamps)
        self._sim = hasattr(transport, "kick")
        self.workers = (SimWorkerPool if self._sim else ThreadWorkerPool)(self, self.cfg.num_workers)
        self._completions: deque = deque()
        self._thread_completions: queue.SimpleQueue = queue.SimpleQueue()
        self._owner = threading.get_ident()
        self._tx: list[TxPkt] = []
        self._tx_retx = False
        self._ready_handlers: list = []
        self._failing: list = []
        self._draining_servers: list[Session] = []
        self._next_scan = 0
        self._next_ctrl_poll = 0
        self._next_hb = self.cfg.heartbeat_ns if self.cfg.heartbeats else float("inf")
        self._hb_seq = 0
        self._last_heard: dict = {}
        self._connect_retry: dict[int, int] = {}
        self._req_counter = 0
        self.active_client_slots = 0
        # In the simulator the management inbox can be checked without a call.
        self._ctrl_inbox = getattr(transport, "ctrl_inbox", None)
        if self._sim:
            transport.attach(self)

    # -- setup -------------------------------------------------------------

    def register_handler(self, req_type: int, fn, mode: HandlerMode = HandlerMode.DISPATCH,
                         sim_cost_ns: int | None = None) -> None:
        if not 0 <= req_type <= 0xFF:
            raise ValueError(f"req_type {req_type} does not fit in 8 bits")
        if req_type in self._handlers:
            raise RpcError(f"req_type {req_type} already has a handler")
        self._handlers[req_type] = _Handler(fn, HandlerMode(mode), sim_cost_ns)

    def alloc_msgbuf(self, size: int) -> MsgBuf:
        return alloc_msgbuf(max(1, size), self.cfg.mtu_data, debug=self.cfg.debug)

    def create_session(self, remote, credits: int | None = None, num_slots: int | None = None) -> Session:
        c = self.cfg.credits if credits is None else credits
        n = self.cfg.num_slots if num_slots is None else num_slots
        if not 1 <= n <= 0xFFFF or not 1 <= c <= 0xFFFF:
            raise SessionError("credits and num_slots must be in [1, 65535]")
        self.budget.reserve(c)
        sess = Session(Role.CLIENT, len(self.sessions), remote, credits=c, num_slots=n,
                       mtu_data=self.cfg.mtu_data)
        sess.timely = TimelyState(self.cfg.knobs)
        self.sessions.append(sess)
        self._send_connect(sess)
        self._last_heard.setdefault(remote, self.transport.now_ns())
        self.transport.wake()
        return sess

    def _send_connect(self, sess: Session) -> None:
        msg = mgmt.ConnectReq(sess.session_num, sess.credits, sess.num_slots, sess.mtu_data)
        self.transport.send_ctrl(sess.remote, mgmt.encode(msg))
        self._connect_retry[sess.session_num] = self.transport.now_ns() + self.cfg.connect_retry_ns

    def destroy_session(self, sess: Session) -> None:
        if sess.active_slots() or sess.backlog:
            raise SessionError("session still has outstanding requests")
        self._free_session(sess)

    def _free_session(self, sess: Session) -> None:
        if self.sessions[sess.session_num] is sess:
            self.sessions[sess.session_num] = None
            self.budget.release(sess.credits)
            self._connect_retry.pop(sess.session_num, None)
            if sess.role is Role.SERVER:
                self._server_sessions.pop((sess.remote, sess.remote_session_num), None)
        sess.state = SessionState.FAILED

    # -- client API ----------------------------------------------------------

    def enqueue_request(self, sess: Session, req_type: int, req: MsgBuf, cont,
                        resp: MsgBuf | None = None, tag=None) -> int:
        if self.workers.in_worker():
            raise RpcError("requests must be issued from the endpoint's own thread")
        if sess.role is not Role.CLIENT:
            raise SessionError("enqueue_request needs a client-mode session")
        if req.mtu_data != sess.mtu_data:
            raise ValueError("request msgbuf was not allocated for this session's MTU")
        if req.owned_by_rpc:
            raise RpcError("request msgbuf is already owned by the RPC layer")
        self._req_counter += 1
        now = self.transport.now_ns()
        pending = PendingRequest(req_type, req, resp, cont, tag, now)
        req.owned_by_rpc = True
        if resp is not None:
            resp.owned_by_rpc = True
        if sess.state is SessionState.FAILED:
            self._fail_pending(pending, Status.NODE_FAILURE)
            return self._req_counter
        slot = sess.free_slot() if sess.connected and not sess.backlog else None
        if slot is None:
            enqueue_backlog(sess, pending)
        else:
            self._start(sess, slot, pending)
        self.transport.wake()
        return self._req_counter

    def _start(self, sess: Session, slot, p: PendingRequest) -> None:
        slot.req_msgbuf = p.req_msgbuf
        slot.resp_msgbuf = p.resp_msgbuf
        slot.req_type = p.req_type
        slot.cont = p.cont
        slot.tag = p.tag
        slot.enqueue_ns = p.enqueue_ns
        slot.req_pkts = p.req_msgbuf.num_pkts
        slot.resp_pkts = 0
        slot.num_tx = slot.num_rx = slot.high_tx = 0
        slot.tx_ts.clear()
        slot.retransmissions = 0
        slot.failing = False
        slot.state = SlotState.SENDING_REQ
        slot.rto_deadline = self.transport.now_ns() + self.cfg.rto_ns
        self.active_client_slots += 1
        self._client_tx(sess, slot)

    def _client_tx(self, sess: Session, slot) -> None:
        for p in client_tx_step(sess, slot):
            self._emit_client(sess, p)
        if not slot.stalled and client_has_pending_tx(slot):
            slot.stalled = True
            sess.stall_queue.append((slot, slot.req_num))

    def _unstall(self, sess: Session) -> None:
        q = sess.stall_queue
        while q and sess.credits_available > 0:
            slot, req_num = q.popleft()
            if slot.req_num != req_num or not slot.stalled:
                continue
            slot.stalled = False
            self._client_tx(sess, slot)

    def _emit_client(self, sess: Session, p: TxPkt) -> None:
        sched = schedule_or_bypass(self.limiter, sess.session_num, sess.timely, p, p.size,
                                   self.transport.now_ns())
        if sched is None:
            self._tx.append(p)
            return
        self.transport.charge(self.cpu.wheel_insert_ns)
        self.stats.wheel_inserts += 1
        if p.msgbuf is not None:
            p.msgbuf.nic_refs -= 1
            p.msgbuf.wheel_refs += 1

    # -- server API ------------------------------------------------------------

    def enqueue_response(self, handle: ReqHandle, resp: MsgBuf, *, error: bool = False) -> None:
        if handle.responded:
            raise RpcError(f"request {handle.req_num} already has a response")
        handle.responded = True
        if self.workers.in_worker() or threading.get_ident() != self._owner:
            ready = self.workers.current_ready
            if self._sim:
                self._completions.append((ready, handle, resp, error))
            else:
                self._thread_completions.put((handle, resp, error))
                self.transport.wake()
            return
        self._install_response(handle, resp, error)

    def _respond_error(self, handle: ReqHandle) -> None:
        m = self._alloc_response(handle, 0)
        self.enqueue_response(handle, m, error=True)

    def _alloc_response(self, handle: ReqHandle, size: int) -> MsgBuf:
        m = handle.slot.prealloc
        if self.cfg.prealloc_responses and m is not None and size <= m.capacity:
            if m.nic_refs:
                # An earlier response is still queued for DMA out of this buffer.
                self._flush()
        else:
            self.transport.charge(self.cpu.alloc_ns)
            m = alloc_msgbuf(max(1, size), handle.session.mtu_data, debug=False)
        m.resize(size)
        return m

    def _install_response(self, handle: ReqHandle, resp: MsgBuf, error: bool) -> None:
        sess, slot = handle.session, handle.slot
        if sess.state is SessionState.FAILED or slot.server_req_num != handle.req_num:
            self._maybe_free_server(sess)
            return
        if resp.mtu_data != sess.mtu_data:
            raise ValueError("response msgbuf MTU does not match the session's")
        slot.resp_buf = resp
        slot.resp_error = error
        slot.responded = True
        slot.handle = None
        slot.state = SlotState.DONE
        self._tx.append(server_resp_pkt(sess, slot, 0))

    # -- event loop ------------------------------------------------------------

    def run_event_loop(self, duration_ns: int) -> None:
        if self._sim:
            self.transport.net.run_for(duration_ns)
            return
        end = time.monotonic_ns() + duration_ns
        while time.monotonic_ns() < end:
            self.run_once()

    def run_event_loop_once(self) -> None:
        if self._sim:
            self.transport.run_iteration()
            nxt = self.next_wake_ns()
            if nxt is not None:
                self.transport.kick(nxt)
        else:
            self.run_once()

    def run_once(self) -> None:
        t = self.transport
        cpu = self.cpu
        self._owner = threading.get_ident()
        self.stats.iterations += 1
        t.charge(cpu.loop_ns)
        now = t.now_ns()
        if self._ctrl_inbox is None:
            # Real sockets: check the management socket every mgmt_poll_ns.
            if now >= self._next_ctrl_poll or self._connect_retry:
                self._next_ctrl_poll = now + self.cfg.mgmt_poll_ns
                self._poll_mgmt(now)
        elif self._ctrl_inbox or self._connect_retry or now >= self._next_hb:
            self._poll_mgmt(now)

        pkts = t.rx_burst(self.cfg.rx_batch)
        if pkts:
            rx_ts = self.rx_clock.batch_timestamp()
            for src, buf in pkts:
                self._process_pkt(src, buf.data, rx_ts)
            self._run_handlers()
            t.release_rx([b for _, b in pkts])

        if self._completions or not self._sim:
            self._worker_completions()
        now = t.now_ns()
        if now >= self._next_scan:
            self._scan(now)
        if self.limiter.pending:
            self._poll_wheel(now)
        self._transmit()

    def next_wake_ns(self) -> int | None:
        """Earliest time this endpoint has work to do on its own (sim only)."""
        cand = []
        if self._completions:
            cand.append(min(c[0] for c in self._completions))
        due = self.limiter.next_due_ns()
        if due is not None:
            cand.append(due)
        if self._needs_scan():
            cand.append(self._next_scan)
        if self._connect_retry:
            cand.append(min(self._connect_retry.values()))
        if self.cfg.heartbeats and self._last_heard:
            cand.append(self._next_hb)
        return min(cand) if cand else None

    def _needs_scan(self) -> bool:
        return bool(self.active_client_slots or self._failing or self._draining_servers)

    # -- receive path ------------------------------------------------------------

    def _process_pkt(self, src, data, rx_ts: int) -> None:
        st = self.stats
        st.rx_pkts += 1
        self.transport.charge(self.cpu.rx_pkt_ns)
        try:
            hdr = unpack_header_from(data)
        except CodecError:
            st.codec_drops += 1
            return
        sn = hdr.session_num
        sess = self.sessions[sn] if sn < len(self.sessions) else None
        if sess is None or sess.remote != src or sess.state is SessionState.FAILED:
            st.unknown_session_drops += 1
            return
        self._last_heard[src] = rx_ts
        try:
            if sess.role is Role.SERVER:
                if hdr.pkt_type is PktType.REQ_DATA:
                    self._server_req(sess, hdr, data)
                elif hdr.pkt_type is PktType.REQ_FOR_RESP:
                    slot = sess.slots[hdr.req_num % sess.num_slots]
                    self._tx.extend(server_rfr_step(sess, slot, hdr))
                else:
                    st.unknown_session_drops += 1
            elif hdr.pkt_type in (PktType.RESP_DATA, PktType.CREDIT_RETURN):
                self._client_rx(sess, hdr, data, rx_ts)
            else:
                st.unknown_session_drops += 1
        except ProtocolError as exc:
            st.protocol_errors += 1
            log.warning("%s: protocol error on session %d: %s", self.name, sn, exc)
            self.handle_node_failure(sess.remote)

    def _server_req(self, sess: Session, hdr, data) -> None:
        slot = sess.slots[hdr.req_num % sess.num_slots]
        pkts, verdict = server_rx_step(sess, slot, hdr)
        self._tx.extend(pkts)
        if verdict is Verdict.DROP or verdict is Verdict.DUPLICATE:
            return
        payload = data[HDR_SIZE:]
        if slot.req_pkts == 1:
            handler = self._handlers.get(hdr.req_type)
            if (self.cfg.zerocopy_rx and handler is not None
                    and handler.mode is HandlerMode.DISPATCH):
                if hdr.msg_size != len(payload):
                    raise ProtocolError(f"msg_size {hdr.msg_size} != payload {len(payload)}")
                slot.rx_msgbuf = MsgBuf.from_packet(data)
                self._ready_handlers.append((sess, slot, True))
                return
        if slot.rx_msgbuf is None:
            self.transport.charge(self.cpu.alloc_ns)
            slot.rx_msgbuf = alloc_msgbuf(max(1, hdr.msg_size), sess.mtu_data, debug=False)
            slot.rx_msgbuf.resize(hdr.msg_size)
        n = reassemble(slot.rx_msgbuf, hdr, payload)
        self.transport.charge(self.cpu.copy_ns(n))
        if verdict is Verdict.COMPLETE:
            self._ready_handlers.append((sess, slot, False))

    def _run_handlers(self) -> None:
        ready = self._ready_handlers
        if not ready:
            return
        self._ready_handlers = []
        for sess, slot, borrowed in ready:
            self._invoke(sess, slot, borrowed)

    def _invoke(self, sess: Session, slot, borrowed: bool) -> None:
        h = self._handlers.get(slot.req_type)
        mode = h.mode if h is not None else HandlerMode.DISPATCH
        handle = ReqHandle(self, sess, slot, slot.server_req_num, slot.req_type, slot.rx_msgbuf,
                           mode, borrowed)
        slot.handle = handle
        slot.executed += 1
        self.stats.handlers_run += 1
        if h is None:
            self._respond_error(handle)
            return
        cost = h.sim_cost_ns if h.sim_cost_ns is not None else self.cpu.handler_ns
        if mode is HandlerMode.WORKER:
            self.workers.submit(handle, h.fn, cost)
            return
        self.transport.charge(cost)
        try:
            h.fn(handle)
        except Exception:
            log.exception("%s: handler for req_type %d raised", self.name, slot.req_type)
            if not handle.responded:
                self._respond_error(handle)
        if borrowed and not handle.responded:
            # The handler kept the request past its return (nested RPC):
            # the borrowed RX buffer goes back to the NIC, so copy it out.
            m = handle.request
            self.transport.charge(self.cpu.alloc_ns + self.cpu.copy_ns(m.data_size))
            own = alloc_msgbuf(max(1, m.data_size), sess.mtu_data, debug=False)
            own.resize(m.data_size)
            own.buf[HDR_SIZE:HDR_SIZE + m.data_size] = m.data
            handle.request = own
            slot.rx_msgbuf = own
            handle.borrowed = False

    def _worker_completions(self) -> None:
        if self._sim:
            c = self._completions
            if not c:
                return
            now = self.transport.now_ns()
            keep = deque()
            while c:
                item = c.popleft()
                if item[0] <= now:
                    self._install_response(item[1], item[2], item[3])
                else:
                    keep.append(item)
            self._completions = keep
            return
        q = self._thread_completions
        while True:
            try:
                handle, resp, error = q.get_nowait()
            except queue.Empty:
                return
            self._install_response(handle, resp, error)

    def _client_rx(self, sess: Session, hdr, data, rx_ts: int) -> None:
        st = self.stats
        slot = sess.slots[hdr.req_num % sess.num_slots]
        if slot.req_num != hdr.req_num or slot.state is SlotState.FREE or slot.failing:
            st.stale_drops += 1
            return
        idx = server_pkt_index(slot, hdr)
        if drop_reordered(idx, slot.num_rx):
            st.reorder_drops += 1
            return
        is_resp = hdr.pkt_type is PktType.RESP_DATA
        if is_resp and drop_response_if_retransmit_queued(slot.req_msgbuf):
            st.retx_queued_drops += 1
            return
        tx_ts = slot.tx_ts.get(idx)
        if tx_ts is not None:
            self._rtt_sample(sess, rx_ts, tx_ts)
        client_accept(sess, slot, idx)
        if is_resp:
            if hdr.pkt_num == 0:
                client_on_first_response(slot, hdr)
                self._prepare_resp(slot, hdr)
            n = reassemble(slot.resp_msgbuf, hdr, data[HDR_SIZE:])
            self.transport.charge(self.cpu.copy_ns(n))
            if client_done(slot):
                status = Status.REMOTE_ERROR if hdr.flags & FLAG_ERROR else Status.OK
                self._complete(sess, slot, status)
                self._unstall(sess)
                return
        self._client_tx(sess, slot)
        self._unstall(sess)

    def _rtt_sample(self, sess: Session, rx_ts: int, tx_ts: int) -> None:
        knobs = self.cfg.knobs
        if knobs.enable_cc and not knobs.batched_timestamps:
            rx_ts = self.rx_clock.stamp()
            self.transport.charge(self.cpu.timestamp_ns)
        rtt = rx_ts - tx_ts
        if self.cfg.record_rtts:
            self.stats.rtt_ns.append(rtt)
        if not knobs.enable_cc:
            return
        ts = sess.timely
        before = ts.num_updates
        record_rtt_and_update(ts, max(rtt, 1) / 1000.0, rx_ts)
        if ts.num_updates != before:
            self.stats.timely_updates += 1
            self.transport.charge(self.cpu.timely_update_ns)

    def _prepare_resp(self, slot, hdr) -> None:
        m = slot.resp_msgbuf
        size = hdr.msg_size
        if m is None or m.capacity < max(size, 1) or m.mtu_data != slot.req_msgbuf.mtu_data:
            self.transport.charge(self.cpu.alloc_ns)
            m = alloc_msgbuf(max(1, size), slot.req_msgbuf.mtu_data, debug=self.cfg.debug)
            slot.resp_msgbuf = m
        m.resize(size)

    def _complete(self, sess: Session, slot, status: Status) -> None:
        req = slot.req_msgbuf
        if req.tx_refs():
            # Never hand a msgbuf back while a transmit queue still points at it.
            self.stats.audit_violations += 1
            log.error("%s: continuation with %d TX references to its request", self.name, req.tx_refs())
        resp = slot.resp_msgbuf if status is Status.OK or status is Status.REMOTE_ERROR else None
        done = Completion(status, req, resp, slot.tag, self.transport.now_ns() - slot.enqueue_ns)
        cont = slot.cont
        self._free_slot(sess, slot)
        req.owned_by_rpc = False
        if resp is not None:
            resp.owned_by_rpc = False
        self.stats.continuations += 1
        self.transport.charge(self.cpu.continuation_ns)
        if cont is not None:
            cont(done)
        if sess.connected:
            for s, p in drain_backlog(sess):
                self._start(sess, s, p)

    def _free_slot(self, sess: Session, slot) -> None:
        if slot.in_flight > 0:
            # Reclaim credits for packets that no longer need an answer.
            sess.credits_available += slot.in_flight
        slot.num_tx = slot.num_rx = 0
        slot.state = SlotState.FREE
        self.active_client_slots -= 1
        slot.req_num += sess.num_slots
        slot.req_msgbuf = slot.resp_msgbuf = slot.cont = slot.tag = None
        slot.stalled = False
        slot.failing = False
        slot.tx_ts.clear()

    def _fail_pending(self, p: PendingRequest, status: Status) -> None:
        p.req_msgbuf.owned_by_rpc = False
        if p.resp_msgbuf is not None:
            p.resp_msgbuf.owned_by_rpc = False
        self.stats.continuations += 1
        if p.cont is not None:
            p.cont(Completion(status, p.req_msgbuf, None, p.tag,
                              self.transport.now_ns() - p.enqueue_ns))

    # -- timers ------------------------------------------------------------------

    def _scan(self, now: int) -> None:
        self._next_scan = now + self.cfg.rto_scan_ns
        timeout = self.cfg.request_timeout_ns
        for sess in self.sessions:
            if sess is None or sess.role is not Role.CLIENT or sess.state is SessionState.FAILED:
                continue
            for slot in sess.slots:
                if slot.state is SlotState.FREE or slot.failing:
                    continue
                if timeout is not None and now - slot.enqueue_ns >= timeout:
                    slot.failing = True
                    self._failing.append((sess, slot, slot.req_num, Status.TIMEOUT))
                    continue
                if slot.in_flight > 0 and now >= slot.rto_deadline:
                    if slot.req_msgbuf.wheel_refs:
                        # An earlier retransmission is still paced in the
                        # wheel; the timer restarts when it is sent.
                        continue
                    pkts = detect_loss_and_rollback(sess, slot, now)
                    self.stats.retransmissions += 1
                    for p in pkts:
                        self._emit_client(sess, p)
                    if client_has_pending_tx(slot) and not slot.stalled:
                        slot.stalled = True
                        sess.stall_queue.append((slot, slot.req_num))
                    slot.rto_deadline = now + self.cfg.rto_ns
        self._finish_failures()
        if self._draining_servers:
            for sess in list(self._draining_servers):
                self._maybe_free_server(sess)

    def _finish_failures(self) -> None:
        """Fail slots once no transmit queue holds their request any more."""
        if not self._failing:
            return
        keep = []
        for sess, slot, req_num, status in self._failing:
            if slot.req_num != req_num:
                continue
            if slot.req_msgbuf.wheel_refs > 0:
                keep.append((sess, slot, req_num, status))
                continue
            if slot.req_msgbuf.nic_refs > 0:
                self._flush()
            self._complete(sess, slot, status)
            if sess.state is SessionState.FAILED and not sess.active_slots():
                self._free_session(sess)
        self._failing = keep

    def _poll_wheel(self, now: int) -> None:
        for e in poll_wheel(self.limiter, now):
            p = e.item
            m = p.msgbuf
            if m is not None:
                m.wheel_refs -= 1
                m.nic_refs += 1
            sess = p.session
            slot = p.slot
            if sess.state is SessionState.FAILED or slot.req_num != p.req_num or slot.failing:
                p.drop_ref()
                continue
            self._tx.append(p)
        self._finish_failures()

    def _transmit(self) -> None:
        pkts = self._tx
        if not pkts:
            return
        self._tx = []
        t = self.transport
        cpu = self.cpu
        knobs = self.cfg.knobs
        stamp_each = knobs.enable_cc and not knobs.batched_timestamps
        ts = self.tx_clock.batch_timestamp()
        rto = self.cfg.rto_ns
        retx = False
        for p in pkts:
            t.charge(cpu.tx_pkt_ns)
            slot = p.slot
            if slot is not None:
                if stamp_each:
                    t.charge(cpu.timestamp_ns)
                    ts = self.tx_clock.stamp()
                slot.tx_ts[p.cidx] = ts
                slot.rto_deadline = ts + rto
                retx = retx or p.retx
        self.stats.tx_pkts += len(pkts)
        t.tx_burst(pkts)
        if retx:
            self._flush()

    def _flush(self) -> None:
        self.stats.flushes += 1
        self.transport.charge(self.cpu.flush_tx_ns)
        self.transport.flush_tx()

    # -- management --------------------------------------------------------------

    def _poll_mgmt(self, now: int) -> None:
        t = self.transport
        for src, data in t.poll_ctrl():
            try:
                msg = mgmt.decode(data)
            except mgmt.MgmtCodecError:
                self.stats.codec_drops += 1
                continue
            self._last_heard[src] = now
            if isinstance(msg, mgmt.ConnectReq):
                self._on_connect_req(src, msg)
            elif isinstance(msg, mgmt.ConnectResp):
                self._on_connect_resp(src, msg)
        if self._connect_retry:
            for sn, due in list(self._connect_retry.items()):
                if now >= due:
                    self._send_connect(self.sessions[sn])
        if now >= self._next_hb:
            self._next_hb = now + self.cfg.heartbeat_ns
            self._hb_seq += 1
            hb = mgmt.encode(mgmt.Heartbeat(self._hb_seq & 0xFFFFFFFF))
            for remote, heard in list(self._last_heard.items()):
                if now - heard > self.cfg.failure_timeout_ns:
                    self.handle_node_failure(remote)
                else:
                    t.send_ctrl(remote, hb)

    def _on_connect_req(self, src, msg: mgmt.ConnectReq) -> None:
        key = (src, msg.client_session)
        sess = self._server_sessions.get(key)
        status = mgmt.ConnectStatus.OK
        if sess is None:
            if not (1 <= msg.credits and 1 <= msg.num_slots and 1 <= msg.mtu_data):
                status = mgmt.ConnectStatus.BAD_PARAMS
            else:
                try:
                    self.budget.reserve(msg.credits)
                except SessionError:
                    status = mgmt.ConnectStatus.NO_BUDGET
            if status is mgmt.ConnectStatus.OK:
                sess = Session(Role.SERVER, len(self.sessions), src, credits=msg.credits,
                               num_slots=msg.num_slots, remote_session_num=msg.client_session,
                               state=SessionState.CONNECTED, mtu_data=msg.mtu_data)
                if self.cfg.prealloc_responses:
                    for slot in sess.slots:
                        slot.prealloc = alloc_msgbuf(msg.mtu_data, msg.mtu_data, debug=False)
                self.sessions.append(sess)
                self._server_sessions[key] = sess
        server_num = sess.session_num if sess is not None else 0
        self.transport.send_ctrl(src, mgmt.encode(mgmt.ConnectResp(msg.client_session, server_num, status)))

    def _on_connect_resp(self, src, msg: mgmt.ConnectResp) -> None:
        sn = msg.client_session
        sess = self.sessions[sn] if sn < len(self.sessions) else None
        if sess is None or sess.remote != src or sess.state is not SessionState.CONNECTING:
            return
        self._connect_retry.pop(sn, None)
        if msg.status is not mgmt.ConnectStatus.OK:
            self._free_session(sess)
            while sess.backlog:
                self._fail_pending(sess.backlog.popleft(), Status.SESSION_ERROR)
            return
        sess.remote_session_num = msg.server_session
        sess.state = SessionState.CONNECTED
        for slot, p in drain_backlog(sess):
            self._start(sess, slot, p)

    def handle_node_failure(self, remote) -> None:
        """Tear down every session with ``remote``."""
        self.stats.node_failures += 1
        self._last_heard.pop(remote, None)
        self._flush()
        for sess in self.sessions:
            if sess is None or sess.remote != remote or sess.state is SessionState.FAILED:
                continue
            if sess.role is Role.CLIENT:
                sess.state = SessionState.FAILED
                self._connect_retry.pop(sess.session_num, None)
                for slot in sess.slots:
                    if slot.state is not SlotState.FREE and not slot.failing:
                        slot.failing = True
                        self._failing.append((sess, slot, slot.req_num, Status.NODE_FAILURE))
                while sess.backlog:
                    self._fail_pending(sess.backlog.popleft(), Status.NODE_FAILURE)
            else:
                sess.state = SessionState.FAILED
                self._draining_servers.append(sess)
        self._finish_failures()
        for sess in list(self._draining_servers):
            self._maybe_free_server(sess)
        for sess in self.sessions:
            if (sess is not None and sess.role is Role.CLIENT and sess.remote == remote
                    and not sess.active_slots()):
                self._free_session(sess)

    def _maybe_free_server(self, sess: Session) -> None:
        if sess.state is not SessionState.FAILED or sess not in self._draining_servers:
            return
        if any(s.handle is not None and not s.handle.responded for s in sess.slots):
            return
        self._draining_servers.remove(sess)
        self._free_session(sess)

    # -- misc ----------------------------------------------------------------------

    def session_to(self, remote) -> Session | None:
        for s in self.sessions:
            if s is not None and s.role is Role.CLIENT and s.remote == remote:
                return s
        return None

    def close(self) -> None:
        self.workers.close()
        close = getattr(self.transport, "close", None)
        if close is not None:
            close()

