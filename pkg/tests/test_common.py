#!/usr/bin/env python3
"""
Tests for the shared wire layer.

Covers:
- Varint boundaries against a bit-level reference
- PluginVal range checks and binary encoding
- Core frame images, ACK range arithmetic and PADDING folding
- Transport parameter TLVs
- Routine export names
- Seeded bulk round-trips: 10^4 values, frames and parameter lists, 10^5 varints
"""

import ipaddress
import logging
import struct
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pytest

# Add project root to Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.common import frames as fr
from src.common.codec import (
    decode_plugin_val,
    decode_plugin_val_prefix,
    decode_tp_list,
    encode_plugin_val,
    encode_tp_list,
    tp_int,
    tp_int_value,
)
from src.common.errors import BadExportName, DecodeError, EncodingRange, Truncated
from src.common.export_names import parse_export_name, render_export_name
from src.common.fields import ALL_FIELDS, ConnectionField, FieldGroup, host_profile_fields
from src.common.routines import INIT, PLUGIN_CONTROL, Anchor, RoutineId, RoutineKind
from src.common.values import (
    INT_RANGES,
    U64_MAX,
    BytesCapability,
    PluginVal,
    SocketAddr,
    TransportParameter,
    ValKind,
)
from src.common.varint import VARINT_MAX, decode_varint, encode_varint, varint_len


def reference_varint(value: int) -> bytes:
    """Two-bit length prefix followed by the value, big-endian, in the smallest width."""
    for prefix, width in ((0, 1), (1, 2), (2, 4), (3, 8)):
        if value < 1 << (8 * width - 2):
            return ((prefix << (8 * width - 2)) | value).to_bytes(width, "big")
    raise AssertionError("value out of range")


TRIALS = 10_000
VARINT_TRIALS = 100_000
SCALAR_KINDS = [ValKind.BOOL] + list(INT_RANGES)


def random_int(rng, low: int, high: int) -> int:
    """Value in [low, high], skewed towards small magnitudes so every width shows up."""
    raw = int.from_bytes(rng.bytes(8), "little") >> int(rng.integers(0, 64))
    return low + raw % (high - low + 1)


def random_u62(rng) -> int:
    return random_int(rng, 0, VARINT_MAX)


def random_scalar(rng, kind: Optional[ValKind] = None) -> PluginVal:
    if kind is None:
        kind = SCALAR_KINDS[int(rng.integers(len(SCALAR_KINDS)))]
    if kind == ValKind.BOOL:
        return PluginVal.boolean(bool(rng.integers(2)))
    return PluginVal(kind, random_int(rng, *INT_RANGES[kind]))


def random_ack(rng) -> fr.Ack:
    ranges = [(0, int(rng.integers(0, 1000)))]
    for _ in range(int(rng.integers(0, 16))):
        ranges.append((int(rng.integers(0, 1000)), int(rng.integers(0, 1000))))
    span = sum(length for _, length in ranges) + sum(gap + 2 for gap, _ in ranges[1:])
    return fr.Ack(span + random_int(rng, 0, 1 << 40), random_u62(rng), tuple(ranges))


def random_frame(rng, extension: bool = True):
    """One frame of a uniformly chosen type; extension frames only when asked."""
    choice = int(rng.integers(10 if extension else 9))
    if choice == 0:
        return fr.Padding(int(rng.integers(1, 1500)))
    if choice == 1:
        return fr.Ping()
    if choice == 2:
        return random_ack(rng)
    if choice == 3:
        return fr.Crypto(random_u62(rng), rng.bytes(int(rng.integers(0, 64))))
    if choice == 4:
        length = int(rng.integers(0, 1500))
        return fr.Stream(random_u62(rng), random_int(rng, 0, VARINT_MAX - length), length,
                         bool(rng.integers(2)))
    if choice == 5:
        return fr.MaxData(random_u62(rng))
    if choice == 6:
        return fr.PathChallenge(rng.bytes(8))
    if choice == 7:
        return fr.PathResponse(rng.bytes(8))
    if choice == 8:
        return fr.ConnectionClose(random_u62(rng), rng.bytes(int(rng.integers(0, 64))))
    payload = tuple(random_scalar(rng) for _ in range(int(rng.integers(0, 9))))
    return fr.Extension(random_int(rng, fr.CORE_FRAME_TYPE_MAX + 1, VARINT_MAX), payload)


def random_tp(rng) -> TransportParameter:
    return TransportParameter(random_u62(rng), rng.bytes(int(rng.integers(0, 257))))


def random_plugin_val(rng) -> PluginVal:
    kind = ValKind(int(rng.integers(1, len(ValKind) + 1)))
    if kind in SCALAR_KINDS:
        return random_scalar(rng, kind)
    if kind == ValKind.SOCKET_ADDR:
        ip = ipaddress.IPv4Address(rng.bytes(4)) if rng.integers(2) else ipaddress.IPv6Address(rng.bytes(16))
        return PluginVal.socket_addr(SocketAddr(ip, int(rng.integers(0, 1 << 16))))
    if kind == ValKind.QUIC_FRAME:
        return PluginVal.frame(random_frame(rng))
    if kind == ValKind.TRANSPORT_PARAM:
        return PluginVal.transport_param(random_tp(rng))
    if kind == ValKind.BYTES:
        return PluginVal.bytes_cap(BytesCapability(*(random_int(rng, 0, U64_MAX) for _ in range(3))))
    return PluginVal.raw(rng.bytes(int(rng.integers(0, 4097))))


@pytest.fixture(autouse=True)
def quiet():
    # Suppress all output during tests for cleaner results
    logging.getLogger().setLevel(logging.CRITICAL)
    yield


class TestVarint:
    """Test QUIC variable-length integers."""

    BOUNDARIES = [0, 63, 64, 16383, 16384, (1 << 30) - 1, 1 << 30, VARINT_MAX]

    def test_boundaries_match_reference(self):
        """Each width boundary encodes in the expected number of octets."""
        expected_lengths = [1, 1, 2, 2, 4, 4, 8, 8]
        for value, length in zip(self.BOUNDARIES, expected_lengths):
            encoded = encode_varint(value)
            assert len(encoded) == length == varint_len(value)
            assert encoded == reference_varint(value)
            assert decode_varint(encoded) == (value, length)

    def test_neighbours_of_boundaries(self):
        for value in self.BOUNDARIES:
            for near in (value - 1, value, value + 1):
                if 0 <= near <= VARINT_MAX:
                    assert encode_varint(near) == reference_varint(near)
                    assert decode_varint(reference_varint(near)) == (near, varint_len(near))

    def test_random_values_match_reference(self):
        """10^5 seeded values with uniformly drawn bit widths match the reference bit for bit."""
        rng = np.random.default_rng(7)
        bits = rng.integers(1, 63, size=VARINT_TRIALS).astype(np.uint64)
        highs = np.left_shift(np.uint64(1), bits)
        for value in rng.integers(0, highs, dtype=np.uint64):
            value = int(value)
            encoded = encode_varint(value)
            assert encoded == reference_varint(value)
            assert decode_varint(encoded) == (value, len(encoded))

    def test_out_of_range_rejected(self):
        with pytest.raises(EncodingRange):
            encode_varint(VARINT_MAX + 1)
        with pytest.raises(EncodingRange):
            encode_varint(-1)
        with pytest.raises(EncodingRange):
            varint_len(1 << 62)

    def test_truncated_input(self):
        """A length prefix promising more octets than present raises Truncated."""
        with pytest.raises(Truncated):
            decode_varint(b"")
        with pytest.raises(Truncated):
            decode_varint(b"\x40")
        with pytest.raises(Truncated):
            decode_varint(b"\xc0\x00\x00")

    def test_decode_at_offset(self):
        data = b"\xff" + encode_varint(300) + b"\x01"
        assert decode_varint(data, 1) == (300, 2)

    def test_non_minimal_encoding_accepted(self):
        """Decoders accept a value written in a wider form than needed."""
        assert decode_varint(b"\x40\x25") == (37, 2)


class TestPluginVal:
    """Test PluginVal construction and encoding."""

    def test_integer_ranges(self):
        PluginVal.i32(-(1 << 31))
        PluginVal.u64((1 << 64) - 1)
        with pytest.raises(ValueError):
            PluginVal.u32(1 << 32)
        with pytest.raises(ValueError):
            PluginVal.u64(-1)
        with pytest.raises(ValueError):
            PluginVal.i64(1 << 63)

    def test_wrong_payload_type(self):
        with pytest.raises(TypeError):
            PluginVal(ValKind.BOOL, 1)
        with pytest.raises(TypeError):
            PluginVal(ValKind.SOCKET_ADDR, "10.0.0.1:4433")

    def test_raw_buffer_limit(self):
        PluginVal.raw(bytes(4096))
        with pytest.raises(ValueError):
            PluginVal.raw(bytes(4097))

    def test_scalar_helpers(self):
        assert PluginVal.boolean(True).is_scalar()
        assert PluginVal.duration(5).as_int() == 5
        assert not PluginVal.raw(b"x").is_scalar()
        with pytest.raises(TypeError):
            PluginVal.raw(b"x").as_int()

    def test_integer_layout(self):
        """Integers are a one-octet tag followed by fixed-width little-endian."""
        assert encode_plugin_val(PluginVal.u64(5)) == bytes([ValKind.U64]) + struct.pack("<Q", 5)
        assert encode_plugin_val(PluginVal.i32(-2)) == bytes([ValKind.I32]) + struct.pack("<i", -2)
        assert encode_plugin_val(PluginVal.boolean(True)) == bytes([ValKind.BOOL, 1])

    def test_composite_values_decode_back(self):
        """One of each composite variant survives encoding."""
        values = [
            PluginVal.socket_addr(SocketAddr.parse("10.0.0.2:4433")),
            PluginVal.socket_addr(SocketAddr.parse("[2001:db8::1]:443")),
            PluginVal.transport_param(TransportParameter(0x4143, b"")),
            PluginVal.bytes_cap(BytesCapability(3, 100, 50)),
            PluginVal.frame(fr.Ack(10, 25, ((0, 2), (1, 3)))),
            PluginVal.frame(fr.Stream(0, 1000, 200, True)),
            PluginVal.frame(fr.Extension(0xBD, (PluginVal.u64(12000), PluginVal.duration(40000)))),
            PluginVal.text("padding on"),
        ]
        for value in values:
            assert decode_plugin_val(encode_plugin_val(value)) == value

    def test_seeded_values_decode_back(self):
        """10^4 seeded values of every variant survive encoding."""
        rng = np.random.default_rng(11)
        seen = set()
        for _ in range(TRIALS):
            value = random_plugin_val(rng)
            seen.add(value.kind)
            assert decode_plugin_val(encode_plugin_val(value)) == value
        assert seen == set(ValKind)

    def test_trailing_octets_rejected(self):
        encoded = encode_plugin_val(PluginVal.u32(7))
        with pytest.raises(DecodeError):
            decode_plugin_val(encoded + b"\x00")
        value, used = decode_plugin_val_prefix(encoded + b"\x00")
        assert value == PluginVal.u32(7)
        assert used == len(encoded)

    def test_malformed_input(self):
        with pytest.raises(DecodeError):
            decode_plugin_val(b"\x63")
        with pytest.raises(DecodeError):
            decode_plugin_val(bytes([ValKind.U64, 1, 2]))
        with pytest.raises(DecodeError):
            decode_plugin_val(bytes([ValKind.BOOL, 2]))

    def test_socket_addr_identity(self):
        assert SocketAddr.parse("10.0.0.2:4433").identity() == "10-0-0-2-4433"
        with pytest.raises(ValueError):
            SocketAddr.parse("10.0.0.2:70000")


class TestFrames:
    """Test core frame wire images."""

    def test_ack_intervals(self):
        """Gap and length pairs expand to descending inclusive intervals."""
        ack = fr.Ack(largest_acked=20, ack_delay=0, ranges=((0, 2), (1, 3)))
        assert ack.intervals() == [(18, 20), (12, 15)]
        assert ack.acknowledges(13)
        assert not ack.acknowledges(16)
        assert not ack.acknowledges(17)

    def test_ack_from_packet_numbers(self):
        ack = fr.Ack.from_packet_numbers([1, 2, 3, 7, 8, 12])
        assert ack.largest_acked == 12
        assert ack.intervals() == [(12, 12), (7, 8), (1, 3)]
        for pkt in (1, 2, 3, 7, 8, 12):
            assert ack.acknowledges(pkt)

    def test_ack_range_limit(self):
        ack = fr.Ack.from_packet_numbers(range(0, 100, 2), max_ranges=4)
        assert len(ack.ranges) == 4
        assert ack.largest_acked == 98

    def test_ack_below_zero_rejected(self):
        with pytest.raises(ValueError):
            fr.Ack(largest_acked=2, ack_delay=0, ranges=((0, 5),))

    def test_frame_images_parse_back(self):
        frames = [
            fr.Ping(),
            fr.Ack(5, 1000, ((0, 5),)),
            fr.Crypto(0, b"params"),
            fr.Stream(0, 4096, 3, False),
            fr.MaxData(2_000_000),
            fr.PathChallenge(b"12345678"),
            fr.PathResponse(b"87654321"),
            fr.ConnectionClose(0x0A, b"bye"),
        ]
        for frame in frames:
            image = fr.frame_wire(frame)
            assert len(image) == fr.frame_wire_len(frame)
            parsed, used = fr.parse_frame(image)
            assert parsed == frame
            assert used == len(image)

    def test_seeded_images_parse_back(self):
        """10^4 seeded core frames parse back from their wire image."""
        rng = np.random.default_rng(13)
        for _ in range(TRIALS):
            frame = random_frame(rng, extension=False)
            image = fr.frame_wire(frame)
            assert len(image) == fr.frame_wire_len(frame)
            assert fr.parse_frame(image) == (frame, len(image))

    def test_padding_run_folded(self):
        """Consecutive PADDING octets parse as one frame and stop at the next type."""
        image = bytes(37) + fr.frame_wire(fr.Ping())
        frame, used = fr.parse_frame(image)
        assert frame == fr.Padding(37)
        assert used == 37
        assert fr.parse_frame(image, used)[0] == fr.Ping()

    def test_stream_variants_fold(self):
        assert fr.peek_frame_type(bytes([0x0F, 0, 0])) == 0x08

    def test_unknown_and_truncated(self):
        with pytest.raises(DecodeError):
            fr.parse_frame(encode_varint(0xBD))
        with pytest.raises(DecodeError):
            fr.parse_frame(fr.frame_wire(fr.MaxData(70000))[:-1])

    def test_ack_eliciting(self):
        assert not fr.is_ack_eliciting(fr.Ack(0, 0))
        assert not fr.is_ack_eliciting(fr.Padding(5))
        assert fr.is_ack_eliciting(fr.Ping())
        assert fr.is_ack_eliciting(fr.MaxData(1))

    def test_extension_limits(self):
        with pytest.raises(ValueError):
            fr.Extension(0x10)
        with pytest.raises(ValueError):
            fr.Extension(0xD0, tuple(PluginVal.u64(i) for i in range(9)))
        with pytest.raises(ValueError):
            fr.Extension(0xD0, (PluginVal.raw(b"x"),))
        with pytest.raises(DecodeError):
            fr.frame_wire(fr.Extension(0xD0))


class TestTransportParameters:
    """Test the handshake transport parameter list."""

    def test_list_decodes_back(self):
        params = [TransportParameter(0x04, tp_int(1_048_576)), TransportParameter(0x4143, b"")]
        assert decode_tp_list(encode_tp_list(params)) == params
        assert tp_int_value(params[0]) == 1_048_576

    def test_seeded_lists_decode_back(self):
        """10^4 seeded parameter lists survive encoding."""
        rng = np.random.default_rng(17)
        for _ in range(TRIALS):
            params = [random_tp(rng) for _ in range(int(rng.integers(0, 7)))]
            assert decode_tp_list(encode_tp_list(params)) == params

    def test_value_length_limit(self):
        TransportParameter(1, bytes(256))
        with pytest.raises(ValueError):
            TransportParameter(1, bytes(257))

    def test_trailing_octets_rejected(self):
        with pytest.raises(DecodeError):
            decode_tp_list(encode_tp_list([TransportParameter(1, b"\x05")]) + b"\x00")


class TestExportNames:
    """Test routine export naming."""

    def test_define_and_anchored_names(self):
        assert parse_export_name("process_frame_2") == (RoutineId(RoutineKind.PROCESS_FRAME, 2), Anchor.DEFINE)
        assert parse_export_name("before_should_send_frame_e1") == \
            (RoutineId(RoutineKind.SHOULD_SEND_FRAME, 0xE1), Anchor.BEFORE)
        assert parse_export_name("after_plugin_control") == (PLUGIN_CONTROL, Anchor.AFTER)
        assert parse_export_name("init") == (INIT, Anchor.DEFINE)

    def test_render_is_inverse(self):
        for routine, anchor in [(RoutineId(RoutineKind.WRITE_FRAME, 0xBD), Anchor.DEFINE),
                                (RoutineId(RoutineKind.DECODE_TRANSPORT_PARAMETER, 0x4143), Anchor.AFTER),
                                (INIT, Anchor.BEFORE)]:
            assert parse_export_name(render_export_name(routine, anchor)) == (routine, anchor)

    @pytest.mark.parametrize("name", [
        "frobnicate",
        "before_frobnicate_7",
        "process_frame",
        "process_frame_0BD",
        "process_frame_0bd",
        "process_frame_xyz",
        "init_5",
        "during_init",
        "process_frame_10000000000000000",
    ])
    def test_bad_names(self, name):
        with pytest.raises(BadExportName):
            parse_export_name(name)


class TestFields:
    """Test connection field metadata and host profiles."""

    def test_lookup_by_name(self):
        assert ConnectionField.by_name("cwnd") == ConnectionField.CWND
        with pytest.raises(KeyError):
            ConnectionField.by_name("window")

    def test_write_access(self):
        assert ConnectionField.CWND.spec.writable
        assert not ConnectionField.IS_SERVER.spec.writable
        assert ConnectionField.PEER_ADDR.spec.kind == ValKind.SOCKET_ADDR

    def test_profiles(self):
        assert host_profile_fields("all") == ALL_FIELDS
        minimal = host_profile_fields(["connection", "space"])
        assert ConnectionField.RX_DATA in minimal
        assert ConnectionField.CWND not in minimal
        assert all(f.spec.group != FieldGroup.RECOVERY for f in minimal)
