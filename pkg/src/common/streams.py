"""
Interval bookkeeping and the two halves of stream 0, shared by the backends.
"""

import bisect
import logging
from typing import Iterator, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

STREAM_ID = 0
PATTERN_MODULUS = 251


class RangeSet:
    """
    Disjoint, sorted half-open intervals [start, end).

    Used for received packet numbers, received stream octets and acknowledged
    stream octets.
    """

    def __init__(self):
        self._starts: List[int] = []
        self._ends: List[int] = []

    def add(self, start: int, end: int) -> None:
        if end <= start:
            return
        i = bisect.bisect_left(self._ends, start)
        j = bisect.bisect_right(self._starts, end)
        if i < j:
            start = min(start, self._starts[i])
            end = max(end, self._ends[j - 1])
        self._starts[i:j] = [start]
        self._ends[i:j] = [end]

    def covers(self, start: int, end: int) -> bool:
        i = bisect.bisect_right(self._starts, start) - 1
        return i >= 0 and self._ends[i] >= end

    def __contains__(self, value: int) -> bool:
        return self.covers(value, value + 1)

    def subtract_from(self, start: int, end: int) -> List[Tuple[int, int]]:
        """Parts of [start, end) not covered by the set."""
        gaps = []
        cursor = start
        i = max(bisect.bisect_right(self._starts, start) - 1, 0)
        while cursor < end and i < len(self._starts):
            s, e = self._starts[i], self._ends[i]
            if e <= cursor:
                i += 1
                continue
            if s >= end:
                break
            if s > cursor:
                gaps.append((cursor, s))
            cursor = max(cursor, e)
            i += 1
        if cursor < end:
            gaps.append((cursor, end))
        return gaps

    def first_end(self) -> int:
        """End of the interval starting at 0, i.e. the contiguous prefix length."""
        if self._starts and self._starts[0] == 0:
            return self._ends[0]
        return 0

    def descending(self) -> Iterator[Tuple[int, int]]:
        """Intervals as inclusive (low, high) pairs, highest first."""
        for start, end in zip(reversed(self._starts), reversed(self._ends)):
            yield start, end - 1

    def trim(self, keep: int) -> None:
        """Drop all but the `keep` highest intervals."""
        if len(self._starts) > keep:
            del self._starts[:-keep]
            del self._ends[:-keep]

    def max(self) -> Optional[int]:
        return self._ends[-1] - 1 if self._ends else None

    def __len__(self) -> int:
        return len(self._starts)

    def __bool__(self) -> bool:
        return bool(self._starts)


def pattern_octets(offset: int, length: int) -> bytes:
    """Deterministic stream content used when no explicit payload is given."""
    return (np.arange(offset, offset + length, dtype=np.int64) % PATTERN_MODULUS).astype(np.uint8).tobytes()


class SendStream:
    """
    Outgoing half of stream 0.

    New data goes out in offset order; lost ranges queue for retransmission and
    are sent first.
    """

    def __init__(self):
        self.data: Optional[bytes] = None
        self.length = 0
        self.fin = False
        self.next_offset = 0
        self.fin_sent = False
        self.acked = RangeSet()
        self.fin_acked = False
        self._retransmit: List[Tuple[int, int]] = []

    def write(self, data: Optional[bytes] = None, length: Optional[int] = None, fin: bool = True) -> None:
        """Queue the whole stream body: explicit octets, or `length` pattern octets."""
        if self.length:
            raise ValueError("stream body already queued")
        self.data = bytes(data) if data is not None else None
        self.length = len(self.data) if self.data is not None else int(length or 0)
        self.fin = fin

    def octets(self, offset: int, length: int) -> bytes:
        if self.data is not None:
            return self.data[offset:offset + length]
        return pattern_octets(offset, length)

    def has_retransmit(self) -> bool:
        return bool(self._retransmit)

    def has_new_data(self) -> bool:
        return self.next_offset < self.length or (self.fin and not self.fin_sent)

    def pending(self) -> bool:
        return self.has_retransmit() or self.has_new_data()

    def next_chunk(self, max_length: int, flow_limit: int) -> Optional[Tuple[int, int, bool, bool]]:
        """
        Pick the next range to send.

        Returns:
            (offset, length, fin, is_retransmission), or None when nothing fits
        """
        while self._retransmit:
            offset, end = self._retransmit[0]
            gaps = self.acked.subtract_from(offset, end)
            if not gaps:
                self._retransmit.pop(0)
                continue
            offset, end = gaps[0]
            length = min(end - offset, max_length)
            rest = [(offset + length, end)] if offset + length < end else []
            self._retransmit[0:1] = rest + gaps[1:]
            fin = self.fin and offset + length == self.length
            return offset, length, fin, True

        available = min(self.length, flow_limit) - self.next_offset
        length = max(0, min(available, max_length))
        fin = self.fin and self.next_offset + length == self.length
        if length == 0 and not (fin and not self.fin_sent):
            return None
        offset = self.next_offset
        self.next_offset += length
        if fin:
            self.fin_sent = True
        return offset, length, fin, False

    def on_acked(self, offset: int, length: int, fin: bool) -> None:
        self.acked.add(offset, offset + length)
        if fin:
            self.fin_acked = True

    def on_lost(self, offset: int, length: int, fin: bool) -> None:
        if length and not self.acked.covers(offset, offset + length):
            self._retransmit.append((offset, offset + length))
        elif fin and not self.fin_acked:
            # a bare FIN goes out again through the new-data path
            self.fin_sent = False

    @property
    def all_acked(self) -> bool:
        return self.length > 0 and self.acked.covers(0, self.length) and (self.fin_acked or not self.fin)


class RecvStream:
    """Incoming half of stream 0; content is checked against the send pattern when asked."""

    def __init__(self, keep_data: bool = False):
        self.received = RangeSet()
        self.final_size: Optional[int] = None
        self.highest = 0
        self._chunks = {} if keep_data else None

    def on_data(self, offset: int, data: bytes, fin: bool) -> None:
        end = offset + len(data)
        if fin:
            self.final_size = end
        self.highest = max(self.highest, end)
        if self._chunks is not None and data and not self.received.covers(offset, end):
            self._chunks[offset] = data
        self.received.add(offset, end)

    @property
    def complete(self) -> bool:
        return self.final_size is not None and self.received.first_end() >= self.final_size

    def assembled(self) -> bytes:
        """Contiguous received prefix (needs keep_data)."""
        if self._chunks is None:
            raise ValueError("stream was not asked to keep its data")
        out = bytearray(self.received.first_end())
        for offset, chunk in self._chunks.items():
            end = min(offset + len(chunk), len(out))
            if offset < end:
                out[offset:end] = chunk[:end - offset]
        return bytes(out)
