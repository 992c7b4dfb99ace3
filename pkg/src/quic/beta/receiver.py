"""
Receive side of the beta backend: frame reading and the ACK state of the
single packet number space.
"""

import logging
from typing import List, Optional, Tuple

from src.common import frames as fr
from src.common.errors import DecodeError, TransportError, TransportErrorCode
from src.common.streams import RangeSet
from src.common.wire import PacketKind
from src.quic.beta.routines import RoutineBridge

logger = logging.getLogger(__name__)


def read_frames(bridge: RoutineBridge, data: bytes, offset: int) -> List[Tuple[object, bytes]]:
    """
    Parse every frame of a packet, plugin parsers first.

    Returns:
        (frame, stream payload) pairs; the payload is empty except for STREAM

    Raises:
        TransportError: FRAME_ENCODING_ERROR on an unparseable frame
    """
    frames = []
    while offset < len(data):
        try:
            frame_type = fr.peek_frame_type(data, offset)
            parsed = bridge.parse(frame_type, data, offset)
            if parsed is None:
                if frame_type > fr.CORE_FRAME_TYPE_MAX:
                    raise DecodeError(f"unknown frame type 0x{frame_type:x}")
                parsed = fr.parse_frame(data, offset)
        except DecodeError as e:
            raise TransportError(TransportErrorCode.FRAME_ENCODING_ERROR, str(e)) from e
        frame, used = parsed
        end = offset + used
        payload = bytes(data[end - frame.length:end]) if isinstance(frame, fr.Stream) else b""
        frames.append((frame, payload))
        offset = end
    return frames


class AckTracker:
    """
    Received packet numbers and when to acknowledge them.

    An ACK is due at once for an Initial, a gap or `threshold` ack-eliciting
    packets; otherwise after `max_delay`.
    """

    def __init__(self, threshold: int, max_delay: int, max_ranges: int):
        self.threshold = threshold
        self.max_delay = max_delay
        self.max_ranges = max_ranges
        self.received = RangeSet()
        self.largest: Optional[int] = None
        self.largest_time = 0
        self.pending = False
        self.due = False
        self.unacked_eliciting = 0
        self.deadline: Optional[int] = None

    def __contains__(self, pkt_num: int) -> bool:
        return pkt_num in self.received

    def record(self, kind: PacketKind, pkt_num: int, now: int, ack_eliciting: bool) -> None:
        in_order = self.largest is None or pkt_num == self.largest + 1
        self.received.add(pkt_num, pkt_num + 1)
        self.received.trim(self.max_ranges)
        if self.largest is None or pkt_num > self.largest:
            self.largest = pkt_num
            self.largest_time = now
        self.pending = True
        if not ack_eliciting:
            return
        self.unacked_eliciting += 1
        if kind == PacketKind.INITIAL or not in_order or self.unacked_eliciting >= self.threshold:
            self.due = True
        elif self.deadline is None:
            self.deadline = now + self.max_delay

    def expire(self, now: int) -> None:
        if self.deadline is not None and now >= self.deadline:
            self.due = True
            self.deadline = None

    def frame(self, now: int) -> fr.Ack:
        intervals = list(self.received.descending())
        high, low = intervals[0][1], intervals[0][0]
        ranges = [(0, high - low)]
        for (prev_low, _), (low, high) in zip(intervals, intervals[1:]):
            ranges.append((prev_low - high - 2, high - low))
        return fr.Ack(intervals[0][1], max(0, now - self.largest_time), tuple(ranges))

    def sent(self) -> None:
        self.pending = False
        self.due = False
        self.unacked_eliciting = 0
        self.deadline = None
