"""
Real UDP transport for quic-lite connections.

Each UdpEndpoint owns one socket and one connection. `run_endpoints` drives any
number of endpoints from a single selector loop, using the wall clock in
microseconds as connection time.
"""

import logging
import selectors
import socket
import time
from typing import Callable, List, Optional, Sequence, Tuple

from src.common.errors import ScenarioTimeout
from src.quic import Connection

logger = logging.getLogger(__name__)

MAX_DATAGRAM = 65535


def parse_host_port(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"Expected host:port, got '{text}'")
    return host or "127.0.0.1", int(port)


class UdpEndpoint:
    """
    Args:
        connection: Client or server connection to drive
        bind: Local host:port ("127.0.0.1:0" for an ephemeral port)
        peer: Remote host:port; a server learns it from the first datagram
    """

    def __init__(self, connection: Connection, bind: str, peer: Optional[str] = None):
        self.connection = connection
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(parse_host_port(bind))
        self.sock.setblocking(False)
        self.peer = parse_host_port(peer) if peer else None
        self.datagrams_sent = 0
        self.datagrams_received = 0

    @property
    def address(self) -> Tuple[str, int]:
        return self.sock.getsockname()

    def fileno(self) -> int:
        return self.sock.fileno()

    def flush(self, now: int) -> None:
        for packet in self.connection.send_packets(now):
            if self.peer is None:
                logger.debug("No peer yet, dropping outgoing packet")
                continue
            try:
                self.sock.sendto(packet.data, self.peer)
                self.datagrams_sent += 1
            except OSError as e:
                logger.warning(f"sendto {self.peer} failed: {e}")

    def receive(self, now: int) -> None:
        while True:
            try:
                data, address = self.sock.recvfrom(MAX_DATAGRAM)
            except BlockingIOError:
                return
            except OSError as e:
                logger.warning(f"recvfrom failed: {e}")
                return
            if self.peer is None:
                self.peer = address
                logger.info(f"Peer is {address[0]}:{address[1]}")
            self.datagrams_received += 1
            self.connection.receive_packet(data, now)

    def close(self) -> None:
        self.sock.close()


def run_endpoints(endpoints: Sequence[UdpEndpoint], done: Callable[[], bool],
                  timeout_s: float = 60.0) -> float:
    """
    Drive every endpoint until `done()` returns True.

    Returns:
        Elapsed wall-clock seconds

    Raises:
        ScenarioTimeout: `done()` did not become true within `timeout_s`
    """
    origin = time.monotonic_ns()

    def clock() -> int:
        return (time.monotonic_ns() - origin) // 1000

    poller = selectors.DefaultSelector()
    for endpoint in endpoints:
        poller.register(endpoint, selectors.EVENT_READ)
    try:
        for endpoint in endpoints:
            endpoint.flush(clock())
        while not done():
            now = clock()
            if now > timeout_s * 1_000_000:
                raise ScenarioTimeout(f"UDP run did not finish within {timeout_s}s")
            deadlines = [d for d in (e.connection.next_timeout() for e in endpoints) if d is not None]
            wait_us = max(0, min(deadlines) - now) if deadlines else 100_000
            for key, _ in poller.select(timeout=min(wait_us, 100_000) / 1e6):
                key.fileobj.receive(clock())
            now = clock()
            for endpoint in endpoints:
                deadline = endpoint.connection.next_timeout()
                if deadline is not None and deadline <= now:
                    endpoint.connection.handle_timeout(now)
                endpoint.flush(now)
    finally:
        poller.close()
    return clock() / 1e6


def finish_client(endpoint: UdpEndpoint, max_waits: int = 100) -> None:
    """
    Close a completed connection and send its CONNECTION_CLOSE. A close held
    back by a plugin timer is retried at each timer deadline.
    """
    connection = endpoint.connection
    connection.close()
    now = connection.now
    endpoint.flush(now)
    for _ in range(max_waits):
        if not connection.closing:
            return
        deadline = connection.next_timeout()
        if deadline is None:
            break
        if deadline > now:
            time.sleep((deadline - now) / 1e6)
            now = deadline
        connection.handle_timeout(now)
        endpoint.flush(now)
    if connection.closing:
        logger.warning("CONNECTION_CLOSE still held back, giving up")


def close_all(endpoints: List[UdpEndpoint]) -> None:
    for endpoint in endpoints:
        endpoint.connection.shutdown()
        endpoint.close()
