"""
Bottleneck link model for the network simulator.

Each direction is a drop-tail FIFO in front of a fixed-rate transmitter,
followed by a constant propagation delay. Random loss is drawn from a seeded
numpy generator so a run is reproducible.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional

import numpy as np

from src.config import config

logger = logging.getLogger(__name__)

CLIENT_TO_SERVER = "c2s"
SERVER_TO_CLIENT = "s2c"
DIRECTIONS = (CLIENT_TO_SERVER, SERVER_TO_CLIENT)


@dataclass
class LinkModel:
    """
    Symmetric point-to-point path.

    Args:
        rate_bps: Transmitter rate in bits per second
        one_way_delay_us: Propagation delay per direction
        queue_packets: Drop-tail capacity; None sizes it to one bandwidth-delay product
        loss_prob: Independent random loss probability per packet
        seed: Seed of the loss generator
        mtu: Packet size used to express the BDP in packets
    """
    rate_bps: float
    one_way_delay_us: int
    queue_packets: Optional[int] = None
    loss_prob: float = 0.0
    seed: int = 1
    mtu: int = 1350

    def __post_init__(self):
        if self.rate_bps <= 0:
            raise ValueError(f"rate_bps must be positive, got {self.rate_bps}")
        if self.one_way_delay_us < 0:
            raise ValueError(f"one_way_delay_us must not be negative, got {self.one_way_delay_us}")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError(f"loss_prob must be in [0, 1], got {self.loss_prob}")
        if self.queue_packets is not None and self.queue_packets < 1:
            raise ValueError(f"queue_packets must be at least 1, got {self.queue_packets}")

    @classmethod
    def from_config(cls, rate_bps: Optional[float] = None, rtt_ms: Optional[float] = None,
                    queue_packets: Optional[int] = None, loss_prob: Optional[float] = None,
                    seed: Optional[int] = None, mtu: Optional[int] = None) -> "LinkModel":
        """Link from the `link` config section, any argument overriding its key."""
        defaults = config.link
        rtt_ms = defaults['rtt_ms'] if rtt_ms is None else rtt_ms
        return cls(
            rate_bps=float(defaults['rate_bps'] if rate_bps is None else rate_bps),
            one_way_delay_us=int(rtt_ms * 1000 / 2),
            queue_packets=defaults['queue_packets'] if queue_packets is None else queue_packets,
            loss_prob=float(defaults['loss_prob'] if loss_prob is None else loss_prob),
            seed=int(defaults['seed'] if seed is None else seed),
            mtu=mtu or config.transport['mtu'],
        )

    @property
    def rtt_us(self) -> int:
        return 2 * self.one_way_delay_us

    @property
    def bdp_packets(self) -> int:
        return max(1, int(self.rate_bps * self.rtt_us / 1e6 / 8 / self.mtu))

    @property
    def capacity(self) -> int:
        return self.queue_packets or self.bdp_packets

    def serialization_us(self, size: int) -> float:
        return size * 8 * 1e6 / self.rate_bps


class LinkDirection:
    """One direction of a LinkModel: queue, transmitter and propagation."""

    def __init__(self, model: LinkModel, name: str):
        self.model = model
        self.name = name
        self._rng = np.random.default_rng([model.seed, DIRECTIONS.index(name)])
        # completion times of the packets queued or in transmission
        self._backlog: Deque[float] = deque()
        self._busy_until = 0.0
        self.delivered = 0
        self.dropped_queue = 0
        self.dropped_random = 0

    def enqueue(self, size: int, now: int) -> Optional[int]:
        """
        Offer a packet to the link at `now`.

        Returns:
            Arrival time at the far end in microseconds, or None when dropped
        """
        while self._backlog and self._backlog[0] <= now:
            self._backlog.popleft()
        if len(self._backlog) >= self.model.capacity:
            self.dropped_queue += 1
            logger.debug(f"{self.name} queue full at t={now}us, dropped {size} octets")
            return None
        if self.model.loss_prob and self._rng.random() < self.model.loss_prob:
            self.dropped_random += 1
            logger.debug(f"{self.name} random loss at t={now}us")
            return None

        start = max(float(now), self._busy_until)
        self._busy_until = start + self.model.serialization_us(size)
        self._backlog.append(self._busy_until)
        self.delivered += 1
        return int(round(self._busy_until)) + self.model.one_way_delay_us

    @property
    def queued(self) -> int:
        return len(self._backlog)

    def stats(self) -> dict:
        return {
            "delivered": self.delivered,
            "dropped_queue": self.dropped_queue,
            "dropped_random": self.dropped_random,
        }
