"""Real UDP sockets: one datagram per packet, header then data.

Management messages use a second socket bound to ``data_port + 1``.
"""

from __future__ import annotations

import errno
import socket
import time

from .base import ZERO_CPU, EndpointId, OutPacket, RxQueue, TransportConfigError

_MAX_DGRAM = 65535


def _bind_pair(host: str, port: int) -> tuple[socket.socket, socket.socket]:
    attempts = 64 if port == 0 else 1
    for _ in range(attempts):
        data = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        data.bind((host, port))
        p = data.getsockname()[1]
        ctrl = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            ctrl.bind((host, p + 1))
        except OSError as exc:
            data.close()
            ctrl.close()
            if port != 0 or exc.errno != errno.EADDRINUSE:
                raise
            continue
        return data, ctrl
    raise TransportConfigError("could not find a free (port, port+1) pair")


class UdpTransport:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, rq_size: int = 4096,
                 sndbuf: int = 4 << 20, rcvbuf: int = 4 << 20):
        self._sock, self._ctrl = _bind_pair(host, port)
        for s in (self._sock, self._ctrl):
            s.setblocking(False)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, sndbuf)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
        self.local = EndpointId(host, self._sock.getsockname()[1])
        self.rxq = RxQueue(rq_size)
        self.cpu = ZERO_CPU
        self.tx_pkts = 0
        self.tx_errors = 0

    def close(self) -> None:
        self._sock.close()
        self._ctrl.close()

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def charge(self, ns: int) -> None:
        pass

    def wake(self) -> None:
        pass

    def tx_burst(self, pkts: list[OutPacket]) -> int:
        sent = 0
        for p in pkts:
            data = p.materialize()
            try:
                self._sock.sendto(data, (p.dest.host, p.dest.port))
            except socket.gaierror as exc:
                raise TransportConfigError(f"cannot resolve {p.dest}") from exc
            except (BlockingIOError, ConnectionRefusedError):
                # Full socket buffer or ICMP unreachable: the datagram is lost.
                self.tx_errors += 1
                continue
            sent += 1
        self.tx_pkts += sent
        return sent

    def rx_burst(self, max_pkts: int):
        recv = self._sock.recvfrom
        for _ in range(max_pkts):
            try:
                data, addr = recv(_MAX_DGRAM)
            except (BlockingIOError, ConnectionRefusedError):
                break
            self.rxq.offer(EndpointId(addr[0], addr[1]), data)
        return self.rxq.burst(max_pkts)

    def release_rx(self, bufs) -> None:
        self.rxq.release(bufs)

    def flush_tx(self) -> None:
        # sendto() has already copied every datagram into the kernel.
        pass

    def send_ctrl(self, dest: EndpointId, data: bytes) -> None:
        try:
            self._ctrl.sendto(data, (dest.host, dest.port + 1))
        except (BlockingIOError, ConnectionRefusedError):
            pass

    def poll_ctrl(self) -> list[tuple[EndpointId, bytes]]:
        out = []
        while True:
            try:
                data, addr = self._ctrl.recvfrom(_MAX_DGRAM)
            except (BlockingIOError, ConnectionRefusedError):
                return out
            out.append((EndpointId(addr[0], addr[1] - 1), data))
