"""
Recovery wiring for the beta backend.

Owns the shared RTT, NewReno, pacer and loss-detector objects and decides
when each is told about a sent, acknowledged or lost packet. Frame-level
consequences are left to callbacks supplied by the connection.
"""

import logging
from typing import Callable, List, Optional

from src.common import frames as fr
from src.common.recovery import MS, LossDetector, NewReno, Pacer, RttEstimator, SentPacket
from src.config import config

logger = logging.getLogger(__name__)

PacketCallback = Callable[[SentPacket], None]


class Recovery:
    def __init__(self, mtu: int, max_ack_delay: int):
        settings = config.recovery
        self.rtt = RttEstimator(settings['initial_rtt_ms'] * MS, settings['granularity_ms'] * MS)
        self.cc = NewReno(mtu)
        self.pacer = Pacer(mtu)
        self.loss = LossDetector(self.rtt, max_ack_delay)
        self.pto_owed = 0
        self.pacing_blocked = False
        self.refresh_pacing()

    def refresh_pacing(self) -> None:
        self.pacer.update_rate(self.cc.cwnd, self.rtt.smoothed)

    def set_cwnd(self, value: int) -> None:
        self.cc.set_cwnd(value)
        self.refresh_pacing()

    def set_ssthresh(self, value: int) -> None:
        self.cc.ssthresh = value

    def set_pacing_rate(self, value: int) -> None:
        self.pacer.override = value or None
        self.refresh_pacing()

    def may_send_data(self, now: int) -> bool:
        """A PTO packet is owed, or both the window and the pacer allow a new data packet."""
        if self.pto_owed:
            return True
        if not self.cc.can_send():
            return False
        if not self.pacer.can_send(now):
            self.pacing_blocked = True
            return False
        return True

    def on_sent(self, packet: SentPacket, now: int) -> None:
        self.loss.on_sent(packet)
        self.cc.on_sent(packet)
        if packet.ack_eliciting:
            self.pacer.on_sent(now, packet.size)
            if self.pto_owed:
                self.pto_owed -= 1

    def on_ack(self, ack: fr.Ack, now: int, acked: PacketCallback, lost: PacketCallback) -> None:
        newly_acked, newly_lost = self.loss.on_ack(ack.intervals(), ack.largest_acked, ack.ack_delay, now)
        for packet in newly_acked:
            self.cc.on_acked(packet)
            acked(packet)
        self.on_lost(newly_lost, now, lost)
        self.refresh_pacing()

    def on_lost(self, packets: List[SentPacket], now: int, lost: PacketCallback) -> None:
        if not packets:
            return
        self.cc.on_lost(packets, now)
        for packet in packets:
            logger.debug(f"packet {packet.pkt_num} lost")
            lost(packet)

    def next_timeout(self, now: int) -> List[Optional[int]]:
        deadlines = [self.loss.next_timeout()]
        if self.pacing_blocked:
            deadlines.append(self.pacer.next_send_time(now))
        return deadlines

    def expire(self, now: int, lost: PacketCallback) -> bool:
        """
        Run loss-time detection, or the PTO when it is due.

        Returns:
            True when the PTO fired
        """
        if self.loss.loss_time is not None and now >= self.loss.loss_time:
            self.on_lost(self.loss.detect_lost(now), now, lost)
            return False
        pto = self.loss.pto_deadline()
        if pto is None or now < pto:
            return False
        self.loss.pto_count += 1
        logger.debug(f"PTO #{self.loss.pto_count} at t={now}us")
        return True
