"""
Common frame representation and the native wire codec for core frame types.

Field layout follows RFC 9000 section 19. Extension frames have no native wire
image: their encoding belongs to the plugin that registered the type.
"""

import logging
from dataclasses import dataclass, field
from typing import ClassVar, Iterable, List, Optional, Tuple, Union

from src.common.errors import DecodeError, Truncated
from src.common.varint import VARINT_MAX, decode_varint, encode_varint, varint_len

logger = logging.getLogger(__name__)

CORE_FRAME_TYPE_MAX = 0x1E
MAX_ACK_RANGES = 250
MAX_EXTENSION_ENTRIES = 8
MAX_CRYPTO_DATA = 4000
MAX_CLOSE_REASON = 1024

# Stream type bits (RFC 9000 19.8)
STREAM_BASE = 0x08
STREAM_OFF_BIT = 0x04
STREAM_LEN_BIT = 0x02
STREAM_FIN_BIT = 0x01


def _check_u62(name: str, value: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= VARINT_MAX:
        raise ValueError(f"{name} must be a 62-bit unsigned integer, got {value!r}")


@dataclass(frozen=True)
class Padding:
    """Run of `length` PADDING octets; length 0 asks the host to fill the packet."""
    frame_type: ClassVar[int] = 0x00
    length: int = 1

    def __post_init__(self):
        _check_u62("length", self.length)


@dataclass(frozen=True)
class Ping:
    frame_type: ClassVar[int] = 0x01


@dataclass(frozen=True)
class Ack:
    """
    ACK frame. `ranges[0]` is the first ACK range as (0, length); every following
    entry is (gap, length) exactly as carried on the wire.
    """
    frame_type: ClassVar[int] = 0x02
    largest_acked: int
    ack_delay: int
    ranges: Tuple[Tuple[int, int], ...] = ((0, 0),)

    def __post_init__(self):
        _check_u62("largest_acked", self.largest_acked)
        _check_u62("ack_delay", self.ack_delay)
        ranges = tuple(tuple(r) for r in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        if not ranges or len(ranges) > MAX_ACK_RANGES:
            raise ValueError(f"ACK needs 1..{MAX_ACK_RANGES} ranges, got {len(ranges)}")
        if ranges[0][0] != 0:
            raise ValueError("first ACK range carries no gap")
        for gap, length in ranges:
            _check_u62("gap", gap)
            _check_u62("range length", length)
        # Raises on ranges that run below packet number zero
        self.intervals()

    def intervals(self) -> List[Tuple[int, int]]:
        """Acknowledged packet numbers as inclusive (low, high) pairs, descending."""
        result = []
        high = self.largest_acked
        for index, (gap, length) in enumerate(self.ranges):
            if index > 0:
                high = low - gap - 2
            low = high - length
            if low < 0:
                raise ValueError("ACK ranges extend below packet number 0")
            result.append((low, high))
        return result

    def acknowledges(self, pkt_num: int) -> bool:
        return any(low <= pkt_num <= high for low, high in self.intervals())

    @classmethod
    def from_packet_numbers(cls, pkt_nums: Iterable[int], ack_delay: int = 0,
                            max_ranges: int = 32) -> "Ack":
        """Build an ACK covering `pkt_nums`, keeping the `max_ranges` highest ranges."""
        numbers = sorted(set(pkt_nums), reverse=True)
        if not numbers:
            raise ValueError("cannot acknowledge an empty set")
        intervals = []
        high = low = numbers[0]
        for num in numbers[1:]:
            if num == low - 1:
                low = num
            else:
                intervals.append((low, high))
                high = low = num
        intervals.append((low, high))
        intervals = intervals[:max_ranges]

        ranges = [(0, intervals[0][1] - intervals[0][0])]
        for (prev_low, _), (low, high) in zip(intervals, intervals[1:]):
            ranges.append((prev_low - high - 2, high - low))
        return cls(numbers[0], ack_delay, tuple(ranges))


@dataclass(frozen=True)
class Crypto:
    frame_type: ClassVar[int] = 0x06
    offset: int
    data: bytes

    def __post_init__(self):
        _check_u62("offset", self.offset)
        object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) > MAX_CRYPTO_DATA:
            raise ValueError(f"CRYPTO data too long: {len(self.data)}")


@dataclass(frozen=True)
class Stream:
    """STREAM frame header; the payload octets travel beside it, not inside it."""
    frame_type: ClassVar[int] = STREAM_BASE
    stream_id: int
    offset: int
    length: int
    fin: bool = False

    def __post_init__(self):
        _check_u62("stream_id", self.stream_id)
        _check_u62("offset", self.offset)
        _check_u62("length", self.length)
        if self.offset + self.length > VARINT_MAX:
            raise ValueError("stream offset + length exceeds 2^62 - 1")


@dataclass(frozen=True)
class MaxData:
    frame_type: ClassVar[int] = 0x10
    maximum: int

    def __post_init__(self):
        _check_u62("maximum", self.maximum)


@dataclass(frozen=True)
class PathChallenge:
    frame_type: ClassVar[int] = 0x1A
    data: bytes

    def __post_init__(self):
        object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) != 8:
            raise ValueError("path data must be exactly 8 octets")


@dataclass(frozen=True)
class PathResponse:
    frame_type: ClassVar[int] = 0x1B
    data: bytes

    def __post_init__(self):
        object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) != 8:
            raise ValueError("path data must be exactly 8 octets")


@dataclass(frozen=True)
class ConnectionClose:
    frame_type: ClassVar[int] = 0x1C
    code: int
    reason: bytes = b""

    def __post_init__(self):
        _check_u62("code", self.code)
        object.__setattr__(self, "reason", bytes(self.reason))
        if len(self.reason) > MAX_CLOSE_REASON:
            raise ValueError("close reason too long")


@dataclass(frozen=True)
class Extension:
    """Plugin-defined frame: a type from the extension space plus up to 8 scalar values."""
    frame_type: int
    payload: tuple = field(default_factory=tuple)

    def __post_init__(self):
        from src.common.values import PluginVal

        _check_u62("frame_type", self.frame_type)
        if self.frame_type <= CORE_FRAME_TYPE_MAX:
            raise ValueError(f"extension type 0x{self.frame_type:x} collides with a core frame")
        payload = tuple(self.payload)
        object.__setattr__(self, "payload", payload)
        if len(payload) > MAX_EXTENSION_ENTRIES:
            raise ValueError(f"extension payload holds at most {MAX_EXTENSION_ENTRIES} values")
        for entry in payload:
            if not isinstance(entry, PluginVal) or not entry.is_scalar():
                raise ValueError("extension payload entries must be scalar PluginVals")


Frame = Union[Padding, Ping, Ack, Crypto, Stream, MaxData, PathChallenge,
              PathResponse, ConnectionClose, Extension]

CORE_FRAME_CLASSES = (Padding, Ping, Ack, Crypto, Stream, MaxData, PathChallenge,
                      PathResponse, ConnectionClose)


def is_frame(value) -> bool:
    return isinstance(value, CORE_FRAME_CLASSES + (Extension,))


def is_ack_eliciting(frame: Frame) -> bool:
    return not isinstance(frame, (Padding, Ack, ConnectionClose))


# ---------------------------------------------------------------------------
# Native wire codec
# ---------------------------------------------------------------------------

def frame_wire_len(frame: Frame) -> int:
    """Octets the native wire image of `frame` takes."""
    if isinstance(frame, Padding):
        return frame.length
    if isinstance(frame, Ping):
        return 1
    if isinstance(frame, Stream):
        wire_type = STREAM_BASE | STREAM_OFF_BIT | STREAM_LEN_BIT
        return (varint_len(wire_type) + varint_len(frame.stream_id) + varint_len(frame.offset)
                + varint_len(frame.length) + frame.length)
    return len(frame_wire(frame))


def frame_wire(frame: Frame, stream_data: Optional[bytes] = None) -> bytes:
    """
    Encode a core frame to its RFC 9000 wire image.

    Args:
        frame: Any core frame
        stream_data: STREAM payload octets; zero octets are used when omitted

    Raises:
        DecodeError: For extension frames, whose encoding is plugin-defined
    """
    if isinstance(frame, Padding):
        return bytes(frame.length)
    if isinstance(frame, Ping):
        return b"\x01"
    if isinstance(frame, Ack):
        out = [encode_varint(0x02), encode_varint(frame.largest_acked),
               encode_varint(frame.ack_delay), encode_varint(len(frame.ranges) - 1),
               encode_varint(frame.ranges[0][1])]
        for gap, length in frame.ranges[1:]:
            out.append(encode_varint(gap))
            out.append(encode_varint(length))
        return b"".join(out)
    if isinstance(frame, Crypto):
        return (encode_varint(0x06) + encode_varint(frame.offset)
                + encode_varint(len(frame.data)) + frame.data)
    if isinstance(frame, Stream):
        if stream_data is None:
            stream_data = bytes(frame.length)
        if len(stream_data) != frame.length:
            raise ValueError("stream_data length does not match the frame")
        wire_type = STREAM_BASE | STREAM_OFF_BIT | STREAM_LEN_BIT | (STREAM_FIN_BIT if frame.fin else 0)
        return (encode_varint(wire_type) + encode_varint(frame.stream_id)
                + encode_varint(frame.offset) + encode_varint(frame.length) + bytes(stream_data))
    if isinstance(frame, MaxData):
        return encode_varint(0x10) + encode_varint(frame.maximum)
    if isinstance(frame, (PathChallenge, PathResponse)):
        return encode_varint(frame.frame_type) + frame.data
    if isinstance(frame, ConnectionClose):
        return (encode_varint(0x1C) + encode_varint(frame.code) + encode_varint(0)
                + encode_varint(len(frame.reason)) + frame.reason)
    raise DecodeError(f"no native wire image for frame type 0x{frame.frame_type:x}")


def peek_frame_type(buf: bytes, offset: int = 0) -> int:
    """Read the frame type varint at `offset`, folding STREAM variants to 0x08."""
    try:
        frame_type, _ = decode_varint(buf, offset)
    except Truncated as e:
        raise DecodeError(f"truncated frame type: {e}") from e
    if STREAM_BASE <= frame_type <= 0x0F:
        return STREAM_BASE
    return frame_type


def parse_frame(buf: bytes, offset: int = 0) -> Tuple[Frame, int]:
    """
    Parse one core frame from `buf` at `offset`.

    Consecutive PADDING octets are folded into a single Padding frame.

    Returns:
        tuple: (frame, octets consumed)

    Raises:
        DecodeError: Unknown or malformed frame
    """
    try:
        return _parse_frame(buf, offset)
    except Truncated as e:
        raise DecodeError(f"truncated frame: {e}") from e
    except ValueError as e:
        raise DecodeError(f"invalid frame field: {e}") from e


def _parse_frame(buf: bytes, offset: int) -> Tuple[Frame, int]:
    start = offset
    frame_type, n = decode_varint(buf, offset)
    offset += n

    def read() -> int:
        nonlocal offset
        value, used = decode_varint(buf, offset)
        offset += used
        return value

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(buf):
            raise Truncated(f"need {count} octets, {len(buf) - offset} left")
        chunk = bytes(buf[offset:offset + count])
        offset += count
        return chunk

    if frame_type == 0x00:
        while offset < len(buf) and buf[offset] == 0:
            offset += 1
        return Padding(offset - start), offset - start
    if frame_type == 0x01:
        return Ping(), offset - start
    if frame_type == 0x02:
        largest, delay, count, first = read(), read(), read(), read()
        if count >= MAX_ACK_RANGES:
            raise ValueError(f"too many ACK ranges: {count + 1}")
        ranges = [(0, first)] + [(read(), read()) for _ in range(count)]
        return Ack(largest, delay, tuple(ranges)), offset - start
    if frame_type == 0x06:
        crypto_offset, length = read(), read()
        return Crypto(crypto_offset, take(length)), offset - start
    if STREAM_BASE <= frame_type <= 0x0F:
        stream_id = read()
        stream_offset = read() if frame_type & STREAM_OFF_BIT else 0
        length = read() if frame_type & STREAM_LEN_BIT else len(buf) - offset
        take(length)
        return Stream(stream_id, stream_offset, length, bool(frame_type & STREAM_FIN_BIT)), offset - start
    if frame_type == 0x10:
        return MaxData(read()), offset - start
    if frame_type == 0x1A:
        return PathChallenge(take(8)), offset - start
    if frame_type == 0x1B:
        return PathResponse(take(8)), offset - start
    if frame_type == 0x1C:
        code = read()
        read()  # offending frame type
        reason_len = read()
        return ConnectionClose(code, take(reason_len)), offset - start
    raise DecodeError(f"unknown frame type 0x{frame_type:x}")


def native_log_text(frame: Frame) -> str:
    """Native one-line rendering used when no plugin defines LogFrame."""
    if isinstance(frame, Padding):
        return f"PADDING len={frame.length}"
    if isinstance(frame, Ping):
        return "PING"
    if isinstance(frame, Ack):
        return f"ACK largest={frame.largest_acked} delay={frame.ack_delay} ranges={len(frame.ranges)}"
    if isinstance(frame, Crypto):
        return f"CRYPTO off={frame.offset} len={len(frame.data)}"
    if isinstance(frame, Stream):
        return f"STREAM id={frame.stream_id} off={frame.offset} len={frame.length} fin={int(frame.fin)}"
    if isinstance(frame, MaxData):
        return f"MAX_DATA max={frame.maximum}"
    if isinstance(frame, PathChallenge):
        return f"PATH_CHALLENGE data={frame.data.hex()}"
    if isinstance(frame, PathResponse):
        return f"PATH_RESPONSE data={frame.data.hex()}"
    if isinstance(frame, ConnectionClose):
        return f"CONNECTION_CLOSE code=0x{frame.code:x} reason={frame.reason!r}"
    return f"FRAME type=0x{frame.frame_type:x} (opaque)"
