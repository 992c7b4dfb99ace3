"""
QUIC Variable-Length Integer Encoding/Decoding (RFC 9000 Section 16)
"""

import struct
from typing import Tuple

from src.common.errors import EncodingRange, Truncated

VARINT_MAX = (1 << 62) - 1


def varint_len(value: int) -> int:
    """Number of octets the shortest encoding of `value` takes."""
    if value <= 63:
        return 1
    elif value <= 16383:
        return 2
    elif value <= 1073741823:
        return 4
    elif value <= VARINT_MAX:
        return 8
    raise EncodingRange(f"varint out of range: {value}")


def encode_varint(value: int) -> bytes:
    """
    Encode integer using QUIC variable-length encoding.

    Args:
        value: Integer to encode (0 to 2^62-1)

    Returns:
        bytes: Encoded value (1, 2, 4, or 8 bytes)

    Raises:
        EncodingRange: If value is negative or not below 2^62
    """
    if value < 0 or value > VARINT_MAX:
        raise EncodingRange(f"varint out of range: {value}")
    if value <= 63:
        return struct.pack("B", value)
    elif value <= 16383:
        return struct.pack(">H", value | 0x4000)
    elif value <= 1073741823:
        return struct.pack(">I", value | 0x80000000)
    else:
        return struct.pack(">Q", value | 0xC000000000000000)


def decode_varint(data: bytes, offset: int = 0) -> Tuple[int, int]:
    """
    Decode QUIC variable-length integer.

    Args:
        data: Bytes to decode from
        offset: Starting offset in data

    Returns:
        tuple: (value, bytes_consumed)

    Raises:
        Truncated: If data ends before the encoded length
    """
    if offset >= len(data):
        raise Truncated("empty varint")
    first_byte = data[offset]
    length = 1 << (first_byte >> 6)
    if offset + length > len(data):
        raise Truncated(f"varint needs {length} octets, {len(data) - offset} left")

    if length == 1:
        return first_byte & 0x3f, 1
    elif length == 2:
        value = struct.unpack_from(">H", data, offset)[0] & 0x3fff
        return value, 2
    elif length == 4:
        value = struct.unpack_from(">I", data, offset)[0] & 0x3fffffff
        return value, 4
    else:
        value = struct.unpack_from(">Q", data, offset)[0] & 0x3fffffffffffffff
        return value, 8
