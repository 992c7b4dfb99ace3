"""
Cleartext packet framing.

    packet = kind (1 octet) | packet number (varint) | frames

Kind 0x01 is Initial (handshake, padded to the initial packet size), 0x02 is
OneRtt. There is no header protection and no encryption.
"""

from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple

from src.common.errors import DecodeError, Truncated
from src.common.varint import decode_varint, encode_varint


class PacketKind(IntEnum):
    INITIAL = 0x01
    ONE_RTT = 0x02


@dataclass(frozen=True)
class Packet:
    kind: PacketKind
    pkt_num: int
    data: bytes
    frame_types: Tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.data)


def encode_header(kind: PacketKind, pkt_num: int) -> bytes:
    return bytes([kind]) + encode_varint(pkt_num)


def header_len(pkt_num: int) -> int:
    return len(encode_varint(pkt_num)) + 1


def decode_header(data: bytes) -> Tuple[PacketKind, int, int]:
    """
    Returns:
        tuple: (kind, packet number, offset of the first frame)

    Raises:
        DecodeError: Unknown kind or truncated header
    """
    if not data:
        raise DecodeError("empty packet")
    try:
        kind = PacketKind(data[0])
    except ValueError:
        raise DecodeError(f"unknown packet kind 0x{data[0]:02x}") from None
    try:
        pkt_num, used = decode_varint(data, 1)
    except Truncated as e:
        raise DecodeError(f"truncated packet number: {e}") from e
    return kind, pkt_num, 1 + used
