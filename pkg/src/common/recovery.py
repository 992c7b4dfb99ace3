"""
Recovery arithmetic shared by the transport backends (RFC 9002): RTT
estimation, NewReno, the sent-packet map with loss detection and PTO, and a
token-bucket pacer. Each backend decides when to call these.

All times are microseconds, all sizes octets.
"""

import bisect
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from src.common.values import U64_MAX
from src.config import config

logger = logging.getLogger(__name__)

MS = 1000
SECOND = 1_000_000


@dataclass
class SentFrame:
    """A frame carried by a sent packet; `plugin_type` is set when a plugin produced it."""
    frame: object
    plugin_type: Optional[int] = None


@dataclass
class SentPacket:
    pkt_num: int
    time_sent: int
    size: int
    ack_eliciting: bool
    in_flight: bool
    frames: List[SentFrame] = field(default_factory=list)


class RttEstimator:
    def __init__(self, initial_rtt: int, granularity: int):
        self.initial_rtt = initial_rtt
        self.granularity = granularity
        self.latest = 0
        self.smoothed = initial_rtt
        self.var = initial_rtt // 2
        self.min = 0
        self.has_sample = False

    def update(self, sample: int, ack_delay: int, max_ack_delay: int) -> None:
        sample = max(sample, 1)
        self.latest = sample
        if not self.has_sample:
            self.has_sample = True
            self.min = sample
            self.smoothed = sample
            self.var = sample // 2
            return
        self.min = min(self.min, sample)
        adjusted = sample
        ack_delay = min(ack_delay, max_ack_delay)
        if sample >= self.min + ack_delay:
            adjusted = sample - ack_delay
        self.var = (3 * self.var + abs(self.smoothed - adjusted)) // 4
        self.smoothed = (7 * self.smoothed + adjusted) // 8

    def pto_period(self, max_ack_delay: int) -> int:
        return self.smoothed + max(4 * self.var, self.granularity) + max_ack_delay

    def loss_delay(self, time_threshold: float) -> int:
        return max(int(time_threshold * max(self.smoothed, self.latest)), self.granularity)


class NewReno:
    """Slow start, congestion avoidance and a single recovery period per loss event."""

    def __init__(self, mtu: int):
        settings = config.recovery
        self.mtu = mtu
        self.min_window = settings['minimum_window_packets'] * mtu
        self.cwnd = settings['initial_window_packets'] * mtu
        self.ssthresh = U64_MAX
        self.bytes_in_flight = 0
        self.recovery_start: Optional[int] = None

    @property
    def in_slow_start(self) -> bool:
        return self.cwnd < self.ssthresh

    def set_cwnd(self, value: int) -> int:
        """Clamp to the minimum window; returns the value applied."""
        self.cwnd = max(int(value), self.min_window)
        return self.cwnd

    def set_slow_start(self, enabled: bool) -> None:
        self.ssthresh = U64_MAX if enabled else self.cwnd

    def can_send(self) -> bool:
        return self.bytes_in_flight < self.cwnd

    def on_sent(self, packet: SentPacket) -> None:
        if packet.in_flight:
            self.bytes_in_flight += packet.size

    def on_acked(self, packet: SentPacket) -> None:
        if not packet.in_flight:
            return
        self.bytes_in_flight = max(0, self.bytes_in_flight - packet.size)
        if self.recovery_start is not None and packet.time_sent <= self.recovery_start:
            return
        if self.in_slow_start:
            self.cwnd += packet.size
        else:
            self.cwnd += self.mtu * packet.size // self.cwnd

    def on_lost(self, packets: List[SentPacket], now: int) -> None:
        largest_sent_time = 0
        for packet in packets:
            if packet.in_flight:
                self.bytes_in_flight = max(0, self.bytes_in_flight - packet.size)
                largest_sent_time = max(largest_sent_time, packet.time_sent)
        if not largest_sent_time:
            return
        if self.recovery_start is not None and largest_sent_time <= self.recovery_start:
            return
        self.recovery_start = now
        self.ssthresh = max(self.cwnd // 2, self.min_window)
        self.cwnd = self.ssthresh
        logger.debug(f"Congestion event at {now}: cwnd={self.cwnd}")


class Pacer:
    """
    Token bucket refilled at the pacing rate, holding at most `burst` packets.

    The rate follows gain * cwnd / srtt unless overridden.
    """

    def __init__(self, mtu: int):
        settings = config.recovery
        self.gain = settings['pacing_gain']
        self.capacity = settings['pacing_burst_packets'] * mtu
        self.mtu = mtu
        self.tokens = float(self.capacity)
        self.override: Optional[int] = None
        self.rate = 0
        self._last = 0

    def update_rate(self, cwnd: int, srtt: int) -> None:
        if self.override:
            self.rate = self.override
        else:
            self.rate = int(self.gain * cwnd * SECOND / max(srtt, 1))

    def _refill(self, now: int) -> None:
        if now > self._last:
            self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate / SECOND)
            self._last = now

    def can_send(self, now: int) -> bool:
        self._refill(now)
        return self.tokens >= self.mtu

    def next_send_time(self, now: int) -> int:
        self._refill(now)
        if self.tokens >= self.mtu or self.rate <= 0:
            return now
        return now + int((self.mtu - self.tokens) * SECOND / self.rate) + 1

    def on_sent(self, now: int, size: int) -> None:
        self._refill(now)
        self.tokens -= size


class LossDetector:
    """
    Sent-packet map plus packet- and time-threshold loss detection and PTO.

    Outstanding packet numbers are kept sorted so acknowledged ranges resolve
    with bisection.
    """

    def __init__(self, rtt: RttEstimator, max_ack_delay: int):
        settings = config.recovery
        self.rtt = rtt
        self.max_ack_delay = max_ack_delay
        self.packet_threshold = settings['packet_threshold']
        self.time_threshold = settings['time_threshold']
        self.sent: Dict[int, SentPacket] = {}
        self._outstanding: List[int] = []
        self.largest_acked: Optional[int] = None
        self.loss_time: Optional[int] = None
        self.pto_count = 0
        self.last_ack_eliciting_time: Optional[int] = None
        self.ack_eliciting_in_flight = 0
        self.loss_count = 0

    def on_sent(self, packet: SentPacket) -> None:
        self.sent[packet.pkt_num] = packet
        self._outstanding.append(packet.pkt_num)
        if packet.ack_eliciting:
            self.ack_eliciting_in_flight += 1
            self.last_ack_eliciting_time = packet.time_sent

    def _remove(self, pkt_num: int) -> SentPacket:
        packet = self.sent.pop(pkt_num)
        if packet.ack_eliciting:
            self.ack_eliciting_in_flight -= 1
        return packet

    def on_ack(self, intervals: List[Tuple[int, int]], largest: int, ack_delay: int,
               now: int) -> Tuple[List[SentPacket], List[SentPacket]]:
        """
        Apply an ACK.

        Returns:
            tuple: (newly acknowledged packets, packets declared lost)
        """
        acked = []
        for low, high in intervals:
            i = bisect.bisect_left(self._outstanding, low)
            j = bisect.bisect_right(self._outstanding, high)
            if i < j:
                acked.extend(self._remove(p) for p in self._outstanding[i:j])
                del self._outstanding[i:j]
        if not acked:
            return [], []
        acked.sort(key=lambda p: p.pkt_num)
        if self.largest_acked is None or largest > self.largest_acked:
            self.largest_acked = largest
        newest = acked[-1]
        if newest.pkt_num == largest and any(p.ack_eliciting for p in acked):
            self.rtt.update(now - newest.time_sent, ack_delay, self.max_ack_delay)
        self.pto_count = 0
        return acked, self.detect_lost(now)

    def detect_lost(self, now: int) -> List[SentPacket]:
        self.loss_time = None
        if self.largest_acked is None:
            return []
        loss_delay = self.rtt.loss_delay(self.time_threshold)
        lost_before = now - loss_delay
        lost = []
        for pkt_num in self._outstanding:
            if pkt_num > self.largest_acked:
                break
            packet = self.sent[pkt_num]
            if packet.time_sent <= lost_before or self.largest_acked - pkt_num >= self.packet_threshold:
                lost.append(self._remove(pkt_num))
            else:
                deadline = packet.time_sent + loss_delay
                self.loss_time = deadline if self.loss_time is None else min(self.loss_time, deadline)
        if lost:
            lost_nums = {p.pkt_num for p in lost}
            self._outstanding = [p for p in self._outstanding if p not in lost_nums]
            self.loss_count += len(lost)
        return lost

    def pto_deadline(self) -> Optional[int]:
        if not self.ack_eliciting_in_flight or self.last_ack_eliciting_time is None:
            return None
        return self.last_ack_eliciting_time + self.rtt.pto_period(self.max_ack_delay) * (2 ** self.pto_count)

    def next_timeout(self) -> Optional[int]:
        if self.loss_time is not None:
            return self.loss_time
        return self.pto_deadline()

    def in_flight_packets(self) -> List[SentPacket]:
        return [self.sent[p] for p in self._outstanding]
