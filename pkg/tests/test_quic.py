#!/usr/bin/env python3
"""
Tests for the quic-lite transport.

Tests the building blocks and both backends:
- Interval sets, send and receive streams
- NewReno congestion control and RTT estimation
- Packet headers
- Field exposure (alpha and beta agree)
- Full transfers between every backend pairing over a lossless path
- Connection close
"""

import heapq
import itertools
import logging
import sys
from pathlib import Path

import pytest

# Add project root to Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.common import frames as fr
from src.common.errors import DecodeError
from src.common.fields import ALL_FIELDS, ConnectionField as F
from src.common.recovery import NewReno, RttEstimator, SentPacket
from src.common.streams import RangeSet, RecvStream, SendStream, pattern_octets
from src.common.values import PluginVal
from src.common.wire import decode_header, encode_header
from src.config import config
from src.engine.permissions import PermissionSet
from src.plugins import build_plugin
from src.quic import BACKENDS, PacketKind, create_connection, resolve_host_profile

MTU = config.transport['mtu']
PAIRINGS = list(itertools.product(sorted(BACKENDS), repeat=2))


@pytest.fixture(autouse=True)
def quiet():
    # Suppress all output during tests for cleaner results
    logging.getLogger().setLevel(logging.CRITICAL)


def connection_pair(client_backend, server_backend, tmp_path, **kwargs):
    client = create_connection(client_backend, "client", seed=2, sandbox_root=tmp_path / "client", **kwargs)
    server = create_connection(server_backend, "server", seed=3, sandbox_root=tmp_path / "server")
    return client, server


def run_pair(client, server, delay_us=10_000, limit_us=60_000_000, until=None):
    """
    Drive two connections over a fixed-delay, lossless path.

    Returns:
        Virtual time at which `until` (default: transfer complete) held
    """
    done = until or (lambda: client.transfer_complete)
    in_transit = []
    seq = itertools.count()
    now = 0
    client.connect(now)
    for _ in range(500_000):
        for src, dst in ((client, server), (server, client)):
            for packet in src.send_packets(now):
                heapq.heappush(in_transit, (now + delay_us, next(seq), dst, packet.data))
        if done():
            return now
        candidates = [t for t in (client.next_timeout(), server.next_timeout()) if t is not None]
        if in_transit:
            candidates.append(in_transit[0][0])
        assert candidates, "nothing scheduled"
        now = max(now, min(candidates))
        assert now <= limit_us, "virtual time limit reached"
        while in_transit and in_transit[0][0] <= now:
            _, _, dst, data = heapq.heappop(in_transit)
            dst.receive_packet(data, now)
        for conn in (client, server):
            deadline = conn.next_timeout()
            if deadline is not None and deadline <= now:
                conn.handle_timeout(now)
    raise AssertionError("event loop did not converge")


class TestRangeSet:
    """Test interval bookkeeping."""

    def test_merges_adjacent_and_overlapping(self):
        ranges = RangeSet()
        ranges.add(0, 5)
        ranges.add(10, 15)
        ranges.add(5, 10)
        assert len(ranges) == 1
        assert ranges.covers(0, 15)
        ranges.add(20, 25)
        ranges.add(22, 30)
        assert list(ranges.descending()) == [(20, 29), (0, 14)]

    def test_empty_interval_ignored(self):
        ranges = RangeSet()
        ranges.add(5, 5)
        assert not ranges
        assert ranges.max() is None

    def test_subtract(self):
        ranges = RangeSet()
        ranges.add(10, 20)
        ranges.add(30, 40)
        assert ranges.subtract_from(0, 50) == [(0, 10), (20, 30), (40, 50)]
        assert ranges.subtract_from(12, 18) == []
        assert ranges.subtract_from(15, 35) == [(20, 30)]

    def test_prefix_and_membership(self):
        ranges = RangeSet()
        ranges.add(3, 8)
        assert ranges.first_end() == 0
        ranges.add(0, 3)
        assert ranges.first_end() == 8
        assert 7 in ranges
        assert 8 not in ranges

    def test_trim_keeps_highest(self):
        ranges = RangeSet()
        for start in range(0, 100, 10):
            ranges.add(start, start + 5)
        ranges.trim(3)
        assert list(ranges.descending()) == [(90, 94), (80, 84), (70, 74)]


class TestStreams:
    """Test stream 0 send and receive halves."""

    def test_chunks_in_order(self):
        stream = SendStream()
        stream.write(length=2500)
        assert stream.next_chunk(1000, 10_000) == (0, 1000, False, False)
        assert stream.next_chunk(1000, 10_000) == (1000, 1000, False, False)
        assert stream.next_chunk(1000, 10_000) == (2000, 500, True, False)
        assert stream.next_chunk(1000, 10_000) is None

    def test_flow_limit(self):
        stream = SendStream()
        stream.write(length=5000)
        assert stream.next_chunk(4000, 1500) == (0, 1500, False, False)
        assert stream.next_chunk(4000, 1500) is None

    def test_lost_range_goes_first(self):
        stream = SendStream()
        stream.write(length=3000)
        stream.next_chunk(1000, 10_000)
        stream.next_chunk(1000, 10_000)
        stream.on_lost(0, 1000, False)
        assert stream.next_chunk(600, 10_000) == (0, 600, False, True)
        assert stream.next_chunk(600, 10_000) == (600, 400, False, True)
        assert stream.next_chunk(1000, 10_000) == (2000, 1000, True, False)

    def test_acked_part_not_resent(self):
        stream = SendStream()
        stream.write(length=2000)
        stream.next_chunk(2000, 10_000)
        stream.on_acked(0, 500, False)
        stream.on_lost(0, 2000, True)
        assert stream.next_chunk(5000, 10_000) == (500, 1500, True, True)

    def test_all_acked(self):
        stream = SendStream()
        stream.write(b"hello")
        stream.next_chunk(100, 100)
        assert not stream.all_acked
        stream.on_acked(0, 5, True)
        assert stream.all_acked

    def test_write_once(self):
        stream = SendStream()
        stream.write(length=10)
        with pytest.raises(ValueError):
            stream.write(length=10)

    def test_receive_out_of_order(self):
        stream = RecvStream(keep_data=True)
        stream.on_data(5, b"world", True)
        assert not stream.complete
        assert stream.highest == 10
        stream.on_data(0, b"hello", False)
        assert stream.complete
        assert stream.assembled() == b"helloworld"

    def test_assembled_needs_keep_data(self):
        with pytest.raises(ValueError):
            RecvStream().assembled()

    def test_pattern(self):
        assert pattern_octets(250, 3) == bytes([250, 0, 1])
        stream = SendStream()
        stream.write(length=1000)
        assert stream.octets(100, 300) == pattern_octets(100, 300)


class TestRecovery:
    """Test NewReno and the RTT estimator."""

    def sent(self, pkt_num, time_sent=0, size=MTU):
        return SentPacket(pkt_num, time_sent, size, True, True)

    def test_initial_window(self):
        cc = NewReno(MTU)
        assert cc.cwnd == config.recovery['initial_window_packets'] * MTU
        assert cc.in_slow_start

    def test_slow_start_growth(self):
        cc = NewReno(MTU)
        packet = self.sent(0)
        cc.on_sent(packet)
        assert cc.bytes_in_flight == MTU
        cc.on_acked(packet)
        assert cc.cwnd == 11 * MTU
        assert cc.bytes_in_flight == 0

    def test_single_reduction_per_recovery(self):
        cc = NewReno(MTU)
        first, second = self.sent(0, time_sent=100), self.sent(1, time_sent=200)
        cc.on_sent(first)
        cc.on_sent(second)
        cc.on_lost([first], now=1000)
        assert cc.cwnd == 5 * MTU
        assert not cc.in_slow_start
        cc.on_lost([second], now=1100)
        assert cc.cwnd == 5 * MTU

    def test_congestion_avoidance(self):
        cc = NewReno(MTU)
        cc.set_slow_start(False)
        packet = self.sent(0, time_sent=10)
        cc.on_sent(packet)
        cc.on_acked(packet)
        assert cc.cwnd == 10 * MTU + MTU * MTU // (10 * MTU)

    def test_minimum_window(self):
        cc = NewReno(MTU)
        assert cc.set_cwnd(1) == config.recovery['minimum_window_packets'] * MTU

    def test_rtt_first_sample(self):
        rtt = RttEstimator(333_000, 1000)
        rtt.update(40_000, 0, 25_000)
        assert (rtt.smoothed, rtt.var, rtt.min, rtt.latest) == (40_000, 20_000, 40_000, 40_000)

    def test_rtt_ack_delay_adjustment(self):
        rtt = RttEstimator(333_000, 1000)
        rtt.update(40_000, 0, 25_000)
        rtt.update(50_000, 10_000, 25_000)
        assert rtt.smoothed == (7 * 40_000 + 40_000) // 8
        assert rtt.min == 40_000

    def test_ack_delay_capped(self):
        rtt = RttEstimator(333_000, 1000)
        rtt.update(40_000, 0, 25_000)
        rtt.update(100_000, 90_000, 25_000)
        assert rtt.smoothed == (7 * 40_000 + 75_000) // 8


class TestWire:
    """Test the cleartext packet header."""

    def test_header(self):
        header = encode_header(PacketKind.ONE_RTT, 70_000)
        assert decode_header(header + b"\x01") == (PacketKind.ONE_RTT, 70_000, len(header))

    @pytest.mark.parametrize("data", [b"", b"\x07\x00", b"\x02\x40"])
    def test_bad_header(self, data):
        with pytest.raises(DecodeError):
            decode_header(data)


class TestFields:
    """Test that both backends expose the same field values."""

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_initial_values(self, backend, tmp_path):
        conn = create_connection(backend, "server", sandbox_root=tmp_path)
        assert conn.get_field(F.IS_SERVER) == PluginVal.boolean(True)
        assert conn.get_field(F.MTU) == PluginVal.usize(MTU)
        assert conn.get_field(F.CWND) == PluginVal.u64(10 * MTU)
        assert conn.get_field(F.IN_SLOW_START) == PluginVal.boolean(True)
        assert conn.get_field(F.MAX_RX_DATA) == PluginVal.u64(config.transport['initial_max_data'])

    def test_backends_agree(self, tmp_path):
        alpha = create_connection("alpha", "client", sandbox_root=tmp_path)
        beta = create_connection("beta", "client", sandbox_root=tmp_path)
        for fld in ALL_FIELDS:
            assert alpha.get_field(fld) == beta.get_field(fld), fld.name

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_set_cwnd(self, backend, tmp_path):
        conn = create_connection(backend, "server", sandbox_root=tmp_path)
        conn.set_field(F.CWND, PluginVal.u64(40_000))
        assert conn.cwnd == 40_000

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_read_only(self, backend, tmp_path):
        conn = create_connection(backend, "server", sandbox_root=tmp_path)
        with pytest.raises(PermissionError):
            conn.set_field(F.RX_DATA, PluginVal.u64(1))

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_host_profile(self, backend, tmp_path):
        conn = create_connection(backend, "client", host_profile="minimal", sandbox_root=tmp_path)
        assert conn.supported_fields() == resolve_host_profile("minimal")
        assert conn.get_field(F.MTU) == PluginVal.usize(MTU)
        with pytest.raises(KeyError):
            conn.get_field(F.CWND)

    def test_unknown_backend_and_profile(self):
        with pytest.raises(ValueError):
            create_connection("gamma", "client")
        with pytest.raises(ValueError):
            resolve_host_profile("huge")


class TestTransfer:
    """Test full transfers over a lossless fixed-delay path."""

    @pytest.mark.parametrize("client_backend,server_backend", PAIRINGS)
    def test_payload_arrives_intact(self, client_backend, server_backend, tmp_path):
        client, server = connection_pair(client_backend, server_backend, tmp_path, keep_stream_data=True)
        payload = bytes(range(256)) * 400
        server.send_stream_data(payload)
        run_pair(client, server)
        assert client.recv_stream.assembled() == payload
        assert client.established and server.established

    @pytest.mark.parametrize("client_backend,server_backend", PAIRINGS)
    def test_beyond_initial_window(self, client_backend, server_backend, tmp_path):
        """More than initial_max_data needs MAX_DATA from the receiver."""
        client, server = connection_pair(client_backend, server_backend, tmp_path)
        size = config.transport['initial_max_data'] + 500_000
        server.send_stream_data(length=size)
        run_pair(client, server)
        assert client.recv_stream.final_size == size
        assert client.max_rx_data > config.transport['initial_max_data']

    def test_handshake_sizes(self, tmp_path):
        client, server = connection_pair("alpha", "alpha", tmp_path)
        client.connect(0)
        initial = client.send_packets(0)
        assert [p.kind for p in initial] == [PacketKind.INITIAL]
        assert len(initial[0]) == config.transport['initial_packet_size']
        server.receive_packet(initial[0].data, 10_000)
        reply = server.send_packets(10_000)
        assert reply[0].kind == PacketKind.INITIAL
        assert server.established
        client.receive_packet(reply[0].data, 20_000)
        assert client.established
        assert client.max_tx_data == config.transport['initial_max_data']

    def test_one_rtt_before_handshake_dropped(self, tmp_path):
        client, _ = connection_pair("alpha", "alpha", tmp_path)
        client.receive_packet(encode_header(PacketKind.ONE_RTT, 0) + b"\x01", 0)
        assert client.stats["packets_received"] == 0

    def test_garbage_dropped(self, tmp_path):
        client, _ = connection_pair("beta", "beta", tmp_path)
        client.receive_packet(b"\xff\xff", 0)
        assert not client.closed

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_log_frame_native(self, backend, tmp_path):
        conn = create_connection(backend, "client", sandbox_root=tmp_path)
        assert conn.log_frame(fr.MaxData(4096)) == fr.native_log_text(fr.MaxData(4096))


class TestClose:
    """Test connection close."""

    @pytest.mark.parametrize("client_backend,server_backend", PAIRINGS)
    def test_close_reaches_peer(self, client_backend, server_backend, tmp_path):
        client, server = connection_pair(client_backend, server_backend, tmp_path)
        run_pair(client, server, until=lambda: client.established and server.established)
        server.close(0x0, b"bye")
        packets = server.send_packets(server.now)
        assert [p.frame_types for p in packets] == [(fr.ConnectionClose.frame_type,)]
        client.receive_packet(packets[0].data, server.now + 10_000)
        assert client.closed
        assert client.close_code == 0
        assert server.send_packets(server.now) == []

    def test_closed_sends_nothing_new(self, tmp_path):
        client, _ = connection_pair("alpha", "alpha", tmp_path)
        client.close()
        client.close()
        assert len(client.send_packets(0)) == 1
        assert client.send_packets(0) == []
        assert client.next_timeout() is None

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_padded_close(self, backend, tmp_path):
        """With privacy padding active the close is a full-size OneRtt packet."""
        client, server = connection_pair(backend, backend, tmp_path)
        server.load_plugin(build_plugin("privacy_padding"), PermissionSet.all())
        server.send_stream_data(length=20_000)
        run_pair(client, server, until=lambda: client.established and server.established)
        server.close(0x0, b"bye")
        packets = []
        for _ in range(100):
            packets = server.send_packets(server.now)
            if packets:
                break
            assert server.closing
            deadline = server.next_timeout()
            assert deadline is not None
            server.handle_timeout(deadline)
        assert len(packets) == 1
        close = packets[0]
        assert close.kind == PacketKind.ONE_RTT
        assert len(close) == MTU
        assert fr.ConnectionClose.frame_type in close.frame_types
        assert fr.Padding.frame_type in close.frame_types
        assert not server.closing
        client.receive_packet(close.data, server.now + 10_000)
        assert client.closed
        assert client.close_code == 0


class TestPluginsOnConnection:
    """Test plugins attached to real connections."""

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_max_data_plugin_transfer(self, backend, tmp_path):
        client, server = connection_pair(backend, backend, tmp_path)
        client.load_plugin(build_plugin("max_data"), PermissionSet.all())
        size = config.transport['initial_max_data'] + 300_000
        server.send_stream_data(length=size)
        run_pair(client, server)
        assert client.recv_stream.final_size == size

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_padding_on_connection(self, backend, tmp_path):
        client, server = connection_pair(backend, backend, tmp_path)
        server.load_plugin(build_plugin("privacy_padding"), PermissionSet.all())
        sizes = []
        server.send_stream_data(length=50_000)

        original = server.send_packets

        def recording(now):
            packets = original(now)
            sizes.extend(len(p) for p in packets if p.kind == PacketKind.ONE_RTT)
            return packets

        server.send_packets = recording
        run_pair(client, server)
        assert sizes
        assert all(n == MTU for n in sizes)

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_ack_writer_replaces_native_ack(self, backend, tmp_path):
        """A Define on WriteFrame(ACK) writes every ACK the client sends."""
        client, server = connection_pair(backend, backend, tmp_path)
        client.load_plugin(build_plugin("ack_writer"), PermissionSet.all())
        server.send_stream_data(length=50_000)
        run_pair(client, server)
        assert client.recv_stream.final_size == 50_000
        writes = client.plugin_control("ack_writer", 0).outputs[0].value
        assert writes > 0
        assert client.contract_breaches == 0
        assert client.engine.plugin("ack_writer").enabled
