"""
Binary encoding of PluginVal and transport parameters.

PluginVal layout: 1-octet variant tag followed by the variant payload.
Integers are fixed-width little-endian; octet sequences carry a varint length
prefix. The same octets are produced by the plugin SDK runtime, so this module
is the contract between both sides of the sandbox.

    Bool          tag 0x01 | u8 (0 or 1)
    I32 / U32     tag 0x02 / 0x04 | 4 octets
    I64 / U64     tag 0x03 / 0x05 | 8 octets
    Usize         tag 0x06 | u64
    Duration      tag 0x07 | u64 microseconds
    Instant       tag 0x08 | u64 microseconds since the host epoch
    SocketAddr    tag 0x09 | u8 version (4|6) | 4 or 16 address octets | u16 port
    QuicFrame     tag 0x0A | u8 frame kind | fields (see _encode_frame)
    TransportParam tag 0x0B | u64 type | varint length | value
    Bytes         tag 0x0C | u64 tag | u64 max_read | u64 max_write
    RawBuffer     tag 0x0D | varint length | octets
"""

import ipaddress
import struct
from typing import List, Sequence, Tuple

from src.common import frames as fr
from src.common.errors import DecodeError, Truncated
from src.common.values import (
    BytesCapability,
    PluginVal,
    SocketAddr,
    TransportParameter,
    ValKind,
)
from src.common.varint import decode_varint, encode_varint

EXTENSION_KIND = 0xFF

_INT_FORMATS = {
    ValKind.I32: "<i",
    ValKind.I64: "<q",
    ValKind.U32: "<I",
    ValKind.U64: "<Q",
    ValKind.USIZE: "<Q",
    ValKind.DURATION: "<Q",
    ValKind.INSTANT: "<Q",
}

_U64 = struct.Struct("<Q")


def _u64(value: int) -> bytes:
    return _U64.pack(value)


def _seq(data: bytes) -> bytes:
    return encode_varint(len(data)) + data


def encode_plugin_val(value: PluginVal) -> bytes:
    """Encode one PluginVal to its tagged binary form."""
    kind = value.kind
    head = bytes([kind])
    if kind == ValKind.BOOL:
        return head + (b"\x01" if value.value else b"\x00")
    if kind in _INT_FORMATS:
        return head + struct.pack(_INT_FORMATS[kind], value.value)
    if kind == ValKind.SOCKET_ADDR:
        addr = value.value
        return head + bytes([addr.ip.version]) + addr.ip.packed + struct.pack("<H", addr.port)
    if kind == ValKind.QUIC_FRAME:
        return head + _encode_frame(value.value)
    if kind == ValKind.TRANSPORT_PARAM:
        tp = value.value
        return head + _u64(tp.param_type) + _seq(tp.value)
    if kind == ValKind.BYTES:
        cap = value.value
        return head + _u64(cap.tag) + _u64(cap.max_read_len) + _u64(cap.max_write_len)
    if kind == ValKind.RAW_BUFFER:
        return head + _seq(value.value)
    raise DecodeError(f"unencodable variant {kind!r}")


def _encode_frame(frame) -> bytes:
    if isinstance(frame, fr.Extension):
        body = b"".join(encode_plugin_val(v) for v in frame.payload)
        return bytes([EXTENSION_KIND]) + _u64(frame.frame_type) + bytes([len(frame.payload)]) + body

    head = bytes([frame.frame_type])
    if isinstance(frame, fr.Padding):
        return head + _u64(frame.length)
    if isinstance(frame, fr.Ping):
        return head
    if isinstance(frame, fr.Ack):
        out = [head, _u64(frame.largest_acked), _u64(frame.ack_delay), encode_varint(len(frame.ranges))]
        for gap, length in frame.ranges:
            out.append(_u64(gap) + _u64(length))
        return b"".join(out)
    if isinstance(frame, fr.Crypto):
        return head + _u64(frame.offset) + _seq(frame.data)
    if isinstance(frame, fr.Stream):
        return (head + _u64(frame.stream_id) + _u64(frame.offset) + _u64(frame.length)
                + (b"\x01" if frame.fin else b"\x00"))
    if isinstance(frame, fr.MaxData):
        return head + _u64(frame.maximum)
    if isinstance(frame, (fr.PathChallenge, fr.PathResponse)):
        return head + frame.data
    if isinstance(frame, fr.ConnectionClose):
        return head + _u64(frame.code) + _seq(frame.reason)
    raise DecodeError(f"unencodable frame {frame!r}")


class _Reader:
    """Cursor over an octet buffer; every short read raises Truncated."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise Truncated(f"need {count} octets at {self.offset}, have {len(self.data) - self.offset}")
        chunk = bytes(self.data[self.offset:self.offset + count])
        self.offset += count
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def unpack(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def varint(self) -> int:
        value, used = decode_varint(self.data, self.offset)
        self.offset += used
        return value

    def seq(self) -> bytes:
        return self.take(self.varint())


def decode_plugin_val_prefix(data: bytes, offset: int = 0) -> Tuple[PluginVal, int]:
    """
    Decode the PluginVal starting at `offset`.

    Returns:
        tuple: (value, octets consumed)

    Raises:
        DecodeError: Unknown tag, truncated input or out-of-range field
    """
    reader = _Reader(data, offset)
    try:
        value = _read_val(reader)
    except Truncated as e:
        raise DecodeError(f"truncated PluginVal: {e}") from e
    except (ValueError, TypeError) as e:
        raise DecodeError(f"invalid PluginVal: {e}") from e
    return value, reader.offset - offset


def decode_plugin_val(data: bytes) -> PluginVal:
    """Decode exactly one PluginVal; trailing octets are an error."""
    value, consumed = decode_plugin_val_prefix(data)
    if consumed != len(data):
        raise DecodeError(f"{len(data) - consumed} trailing octets after PluginVal")
    return value


def _read_val(reader: _Reader) -> PluginVal:
    tag = reader.u8()
    try:
        kind = ValKind(tag)
    except ValueError:
        raise DecodeError(f"unknown PluginVal tag 0x{tag:02x}") from None

    if kind == ValKind.BOOL:
        octet = reader.u8()
        if octet > 1:
            raise DecodeError(f"invalid Bool octet {octet}")
        return PluginVal.boolean(octet == 1)
    if kind in _INT_FORMATS:
        return PluginVal(kind, reader.unpack(_INT_FORMATS[kind]))
    if kind == ValKind.SOCKET_ADDR:
        version = reader.u8()
        if version == 4:
            ip = ipaddress.IPv4Address(reader.take(4))
        elif version == 6:
            ip = ipaddress.IPv6Address(reader.take(16))
        else:
            raise DecodeError(f"invalid IP version {version}")
        return PluginVal.socket_addr(SocketAddr(ip, reader.unpack("<H")))
    if kind == ValKind.QUIC_FRAME:
        return PluginVal.frame(_read_frame(reader))
    if kind == ValKind.TRANSPORT_PARAM:
        param_type = reader.u64()
        return PluginVal.transport_param(TransportParameter(param_type, reader.seq()))
    if kind == ValKind.BYTES:
        return PluginVal.bytes_cap(BytesCapability(reader.u64(), reader.u64(), reader.u64()))
    return PluginVal.raw(reader.seq())


def _read_frame(reader: _Reader):
    frame_kind = reader.u8()
    if frame_kind == EXTENSION_KIND:
        frame_type = reader.u64()
        count = reader.u8()
        if count > fr.MAX_EXTENSION_ENTRIES:
            raise DecodeError(f"extension payload count {count} exceeds {fr.MAX_EXTENSION_ENTRIES}")
        payload = tuple(_read_val(reader) for _ in range(count))
        return fr.Extension(frame_type, payload)
    if frame_kind == fr.Padding.frame_type:
        return fr.Padding(reader.u64())
    if frame_kind == fr.Ping.frame_type:
        return fr.Ping()
    if frame_kind == fr.Ack.frame_type:
        largest, delay, count = reader.u64(), reader.u64(), reader.varint()
        if count > fr.MAX_ACK_RANGES:
            raise DecodeError(f"too many ACK ranges: {count}")
        ranges = tuple((reader.u64(), reader.u64()) for _ in range(count))
        return fr.Ack(largest, delay, ranges)
    if frame_kind == fr.Crypto.frame_type:
        return fr.Crypto(reader.u64(), reader.seq())
    if frame_kind == fr.Stream.frame_type:
        stream_id, offset, length = reader.u64(), reader.u64(), reader.u64()
        fin = reader.u8()
        if fin > 1:
            raise DecodeError(f"invalid fin octet {fin}")
        return fr.Stream(stream_id, offset, length, fin == 1)
    if frame_kind == fr.MaxData.frame_type:
        return fr.MaxData(reader.u64())
    if frame_kind == fr.PathChallenge.frame_type:
        return fr.PathChallenge(reader.take(8))
    if frame_kind == fr.PathResponse.frame_type:
        return fr.PathResponse(reader.take(8))
    if frame_kind == fr.ConnectionClose.frame_type:
        return fr.ConnectionClose(reader.u64(), reader.seq())
    raise DecodeError(f"unknown frame kind 0x{frame_kind:02x}")


def encode_plugin_vals(values: Sequence[PluginVal]) -> List[bytes]:
    return [encode_plugin_val(v) for v in values]


# ---------------------------------------------------------------------------
# Transport parameters: type(varint) | length(varint) | value
# ---------------------------------------------------------------------------

def encode_tp_tlv(tp: TransportParameter) -> bytes:
    return encode_varint(tp.param_type) + encode_varint(len(tp.value)) + tp.value


def decode_tp_tlv(data: bytes, offset: int = 0) -> Tuple[TransportParameter, int]:
    """Decode one TLV at `offset`; returns (parameter, consumed)."""
    reader = _Reader(data, offset)
    try:
        param_type = reader.varint()
        value = reader.seq()
        tp = TransportParameter(param_type, value)
    except Truncated as e:
        raise DecodeError(f"truncated transport parameter: {e}") from e
    except ValueError as e:
        raise DecodeError(f"invalid transport parameter: {e}") from e
    return tp, reader.offset - offset


def encode_tp_list(params: Sequence[TransportParameter]) -> bytes:
    """Handshake message body: varint count followed by TLVs."""
    return encode_varint(len(params)) + b"".join(encode_tp_tlv(tp) for tp in params)


def decode_tp_list(data: bytes) -> List[TransportParameter]:
    try:
        count, offset = decode_varint(data, 0)
    except Truncated as e:
        raise DecodeError(f"truncated transport parameter list: {e}") from e
    params = []
    for _ in range(count):
        tp, used = decode_tp_tlv(data, offset)
        params.append(tp)
        offset += used
    if offset != len(data):
        raise DecodeError("trailing octets after transport parameter list")
    return params


def tp_int(value: int) -> bytes:
    """Native integer TP values are varints, as in RFC 9000 section 18."""
    return encode_varint(value)


def tp_int_value(tp: TransportParameter) -> int:
    try:
        value, used = decode_varint(tp.value)
    except Truncated as e:
        raise DecodeError(f"empty integer transport parameter 0x{tp.param_type:x}") from e
    if used != len(tp.value):
        raise DecodeError(f"integer transport parameter 0x{tp.param_type:x} has trailing octets")
    return value
