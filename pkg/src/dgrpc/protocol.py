"""Client-driven wire protocol.

Every server packet answers exactly one client packet:

* request packet ``i < Nr - 1``  -> credit return ``CR(i)``
* request packet ``Nr - 1``      -> response packet 0 (once the handler responds)
* RFR for response packet ``j``  -> response packet ``j``

so a lossless ``(Nr, Ns)`` RPC costs ``Nr + Ns + (Nr - 1) + (Ns - 1)``
packets whatever the credit budget.  Only the client keeps state that
loss recovery rolls back (go-back-N to the last in-order server packet).
"""

from __future__ import annotations

import enum

from .msgbuf import (FLAG_ERROR, HDR_SIZE, WIRE_VERSION, MsgBuf, PacketHeader, PktType,
                     num_pkts_for, pack_header, pack_header_into)
from .session import Session, SlotState, SSlot, consume_credit, replenish_credit
from .transport.base import OutPacket


class ProtocolError(RuntimeError):
    pass


class TxPkt(OutPacket):
    """Outgoing packet plus the client bookkeeping needed at transmit time."""

    __slots__ = ("slot", "cidx", "req_num", "retx", "session")

    def __init__(self, dest, msgbuf=None, pkt_idx=0, data=None, size=HDR_SIZE, *,
                 slot=None, cidx=-1, req_num=0, retx=False, session=None):
        self.dest = dest
        self.msgbuf = msgbuf
        self.pkt_idx = pkt_idx
        self.data = data
        self.size = size
        if msgbuf is not None:
            msgbuf.nic_refs += 1
        self.slot = slot
        self.cidx = cidx
        self.req_num = req_num
        self.retx = retx
        self.session = session


def _data_pkt(m: MsgBuf, i: int, hdr: PacketHeader, dest, **kw) -> TxPkt:
    pack_header_into(hdr, m.buf, m.hdr_offset(i))
    length = m.data_size - i * m.mtu_data
    if length > m.mtu_data:
        length = m.mtu_data
    return TxPkt(dest, m, i, None, HDR_SIZE + length, **kw)


def _client_pkt(sess: Session, slot: SSlot, i: int, retx: bool) -> TxPkt:
    kw = dict(slot=slot, cidx=i, req_num=slot.req_num, retx=retx, session=sess)
    if i < slot.req_pkts:
        m = slot.req_msgbuf
        hdr = PacketHeader(WIRE_VERSION, PktType.REQ_DATA, slot.req_type, sess.remote_session_num,
                           i, 0, slot.req_num, m.data_size)
        return _data_pkt(m, i, hdr, sess.remote, **kw)
    j = i - slot.req_pkts + 1
    hdr = PacketHeader(WIRE_VERSION, PktType.REQ_FOR_RESP, slot.req_type, sess.remote_session_num,
                       j, 0, slot.req_num, 0)
    return TxPkt(sess.remote, data=pack_header(hdr), **kw)


def client_tx_limit(slot: SSlot) -> int:
    """How many client packets may have been sent at this point.

    Before the first response packet only request packets are eligible;
    after it, one RFR per remaining response packet."""
    if slot.num_rx < slot.req_pkts:
        return slot.req_pkts
    return slot.req_pkts + slot.resp_pkts - 1


def client_tx_step(sess: Session, slot: SSlot) -> list[TxPkt]:
    out = []
    limit = client_tx_limit(slot)
    while slot.num_tx < limit and sess.credits_available > 0:
        i = slot.num_tx
        consume_credit(sess)
        slot.num_tx = i + 1
        retx = i < slot.high_tx
        if slot.num_tx > slot.high_tx:
            slot.high_tx = slot.num_tx
        out.append(_client_pkt(sess, slot, i, retx))
    if slot.num_tx >= slot.req_pkts and slot.state is SlotState.SENDING_REQ:
        slot.state = SlotState.AWAITING_RESP
    return out


def client_has_pending_tx(slot: SSlot) -> bool:
    return slot.num_tx < client_tx_limit(slot)


def server_pkt_index(slot: SSlot, hdr: PacketHeader) -> int | None:
    """Position of a server packet in the slot's in-order receive sequence."""
    if hdr.pkt_type is PktType.CREDIT_RETURN:
        return hdr.pkt_num if hdr.pkt_num < slot.req_pkts - 1 else None
    if hdr.pkt_type is PktType.RESP_DATA:
        return slot.req_pkts - 1 + hdr.pkt_num
    return None


def drop_reordered(idx: int | None, expected: int) -> bool:
    """Anything but the next in-order server packet is treated as lost."""
    return idx != expected


def client_accept(sess: Session, slot: SSlot, idx: int) -> None:
    """Account an in-order server packet: one credit comes back.

    A late server packet answering a copy sent before the last rollback may
    arrive before the retransmission went out; it still proves delivery, so
    the send counter catches up without touching credits (they were
    reclaimed by the rollback)."""
    if idx >= slot.num_tx:
        slot.num_tx = idx + 1
        if slot.num_tx > slot.high_tx:
            slot.high_tx = slot.num_tx
    else:
        replenish_credit(sess)
    slot.num_rx = idx + 1


def reassemble(m: MsgBuf, hdr: PacketHeader, payload) -> int:
    """Copy one packet's data into place; returns the number of bytes copied."""
    if hdr.msg_size != m.data_size:
        raise ProtocolError(f"msg_size {hdr.msg_size} != {m.data_size} within one message")
    off = hdr.pkt_num * m.mtu_data
    length = min(m.mtu_data, m.data_size - off)
    if length < 0 or (length == 0 and hdr.pkt_num > 0):
        raise ProtocolError(f"packet {hdr.pkt_num} beyond a {m.data_size}-byte message")
    if len(payload) != length:
        raise ProtocolError(f"packet {hdr.pkt_num} carries {len(payload)} bytes, expected {length}")
    m.buf[HDR_SIZE + off:HDR_SIZE + off + length] = payload
    return length


def client_on_first_response(slot: SSlot, hdr: PacketHeader) -> None:
    slot.resp_pkts = num_pkts_for(hdr.msg_size, slot.req_msgbuf.mtu_data)
    slot.state = SlotState.SENDING_RFRS if slot.resp_pkts > 1 else SlotState.DONE


def client_done(slot: SSlot) -> bool:
    return slot.resp_pkts > 0 and slot.num_rx == slot.req_pkts + slot.resp_pkts - 1


def detect_loss_and_rollback(sess: Session, slot: SSlot, now_ns: int) -> list[TxPkt]:
    """Go back to the last in-order server packet, reclaim the credits of
    everything sent after it, and start retransmitting."""
    if now_ns < slot.rto_deadline or slot.state is SlotState.FREE:
        return []
    reclaimed = slot.num_tx - slot.num_rx
    if reclaimed <= 0:
        return []
    replenish_credit(sess, reclaimed)
    slot.num_tx = slot.num_rx
    slot.retransmissions += 1
    if slot.num_tx < slot.req_pkts:
        slot.state = SlotState.SENDING_REQ
    return client_tx_step(sess, slot)


class Verdict(enum.Enum):
    DROP = "drop"
    DUPLICATE = "duplicate"
    ACCEPT = "accept"
    COMPLETE = "complete"


def _cr(sess: Session, slot: SSlot, hdr: PacketHeader) -> TxPkt:
    h = PacketHeader(WIRE_VERSION, PktType.CREDIT_RETURN, hdr.req_type, sess.remote_session_num,
                     hdr.pkt_num, 0, hdr.req_num, 0)
    return TxPkt(sess.remote, data=pack_header(h))


def server_resp_pkt(sess: Session, slot: SSlot, j: int) -> TxPkt:
    m = slot.resp_buf
    flags = FLAG_ERROR if slot.resp_error else 0
    hdr = PacketHeader(WIRE_VERSION, PktType.RESP_DATA, slot.req_type, sess.remote_session_num,
                       j, flags, slot.server_req_num, m.data_size)
    return _data_pkt(m, j, hdr, sess.remote)


def server_rx_step(sess: Session, slot: SSlot, hdr: PacketHeader) -> tuple[list[TxPkt], Verdict]:
    """Handle one request-data packet at the server.

    On ``ACCEPT``/``COMPLETE`` the caller copies the payload in; on
    ``COMPLETE`` it also runs (or hands off) the handler.  Duplicates of
    already-received packets are answered again so a rolled-back client can
    make progress, but never re-run the handler.
    """
    if hdr.req_num < slot.server_req_num:
        return [], Verdict.DROP
    if hdr.req_num > slot.server_req_num:
        if hdr.pkt_num != 0:
            return [], Verdict.DROP
        slot.server_req_num = hdr.req_num
        slot.req_type = hdr.req_type
        slot.req_pkts = num_pkts_for(hdr.msg_size, sess.mtu_data)
        slot.rx_pkts_done = 0
        slot.rx_msgbuf = None
        slot.responded = False
        slot.resp_buf = None
        slot.handle = None
        slot.executed = 0
        slot.state = SlotState.SENDING_REQ
    i = hdr.pkt_num
    last = slot.req_pkts - 1
    if i < slot.rx_pkts_done:
        if i < last:
            return [_cr(sess, slot, hdr)], Verdict.DUPLICATE
        if slot.responded:
            return [server_resp_pkt(sess, slot, 0)], Verdict.DUPLICATE
        return [], Verdict.DUPLICATE
    if i > slot.rx_pkts_done or i > last:
        return [], Verdict.DROP
    slot.rx_pkts_done = i + 1
    if i < last:
        return [_cr(sess, slot, hdr)], Verdict.ACCEPT
    slot.state = SlotState.AWAITING_RESP
    return [], Verdict.COMPLETE


def server_rfr_step(sess: Session, slot: SSlot, hdr: PacketHeader) -> list[TxPkt]:
    if hdr.req_num != slot.server_req_num or not slot.responded:
        return []
    j = hdr.pkt_num
    if not 1 <= j < slot.resp_buf.num_pkts:
        return []
    return [server_resp_pkt(sess, slot, j)]
