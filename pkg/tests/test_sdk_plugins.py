#!/usr/bin/env python3
"""
Tests for the plugin authoring kit and the protocol plugins.

Plugins are attached to mock hosts, so each behaviour is checked without a
transport or a link:
- Builder output: manifest, exports, required fields
- Static inspection of plugin binaries
- ACK logging to the sandbox
- Privacy padding (fill to MTU, halting, timers, toggling)
- Path probing latency
- Two-phase activation of negotiated plugins
- MAX_DATA implemented in a plugin vs natively
"""

import logging
import sys
from pathlib import Path

import pytest

# Add project root to Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.common import frames as fr
from src.common.errors import BadExportName, LoadRejected, RejectReason
from src.common.fields import ConnectionField as F
from src.common.routines import INIT, RoutineId, RoutineKind
from src.common.values import PluginVal, ValKind
from src.config import config
from src.engine.permissions import PermissionSet
from src.engine.plugin import Phase
from src.netsim.mock_host import MAX_DATA, MockHost
from src.plugins import (
    PLUGINS,
    ack_logger,
    build_plugin,
    dummy_frame,
    privacy_padding,
    probe_path,
    write_plugins,
)
from src.plugins import testing
from src.sdk import PluginBuilder, manifest_of
from src.sdk.binary import read_manifest
from src.sdk.inspect import inspect_plugin


@pytest.fixture
def client(tmp_path):
    """Client mock host with sandboxes under tmp_path/client."""
    # Suppress all output during tests for cleaner results
    logging.getLogger().setLevel(logging.CRITICAL)
    mock = MockHost(is_server=False, seed=11, sandbox_root=tmp_path / "client")
    yield mock
    mock.engine.close()


@pytest.fixture
def server(tmp_path):
    """Server mock host with sandboxes under tmp_path/server."""
    mock = MockHost(is_server=True, seed=12, sandbox_root=tmp_path / "server")
    yield mock
    mock.engine.close()


def load(host, name):
    return host.load_plugin(build_plugin(name), PermissionSet.all())


class TestBuilder:
    """Test PluginBuilder output."""

    def test_manifest_lists_exports(self):
        builder = PluginBuilder("counter", permissions=["read"])
        builder.require(F.CWND, F.MTU)
        builder.global_i64("count")
        builder.hook(INIT, "(global.set $count (i64.const 0)) (i64.const 0)")
        builder.hook(RoutineId(RoutineKind.PROCESS_FRAME, 0x42), "(i64.const 0)")
        manifest = manifest_of(builder.build())

        assert manifest.name == "counter"
        assert manifest.exports == ["required_fields", "init", "process_frame_42"]
        assert manifest.required_fields == ["CWND", "MTU"]
        assert manifest.permissions == ["read"]
        assert not manifest.needs_negotiation

    def test_required_fields_reach_engine(self, tmp_path):
        binary = testing.build_needs_field(F.SSTHRESH)
        assert manifest_of(binary).required_fields == ["SSTHRESH"]
        minimal = MockHost(sandbox_root=tmp_path, supported_fields=frozenset({F.MTU}))
        with pytest.raises(LoadRejected) as exc:
            minimal.load_plugin(binary, PermissionSet.all())
        assert exc.value.reason == RejectReason.MISSING_FIELD

    def test_duplicate_hook(self):
        builder = PluginBuilder("twice")
        builder.hook(INIT, "(i64.const 0)")
        with pytest.raises(ValueError):
            builder.hook(INIT, "(i64.const 0)")

    def test_duplicate_data_label(self):
        builder = PluginBuilder("labels")
        builder.data("greeting", b"hello")
        with pytest.raises(ValueError):
            builder.data("greeting", b"again")

    def test_data_symbols_substituted(self):
        builder = PluginBuilder("symbols")
        address, length = builder.data("msg", b"abc")
        builder.constant("ANSWER", 42)
        builder.hook(INIT, "(drop (i32.const {msg})) (drop (i32.const {msg_len})) (i64.const {ANSWER})")
        wat = builder.wat()
        assert f"(i32.const {address})" in wat
        assert f"(i32.const {length})" in wat
        assert "(i64.const 42)" in wat

    def test_module_without_manifest(self):
        assert read_manifest(testing.build_bad_export()) is None
        assert manifest_of(testing.build_raw_arith()) is None


class TestInspect:
    """Test static inspection of plugin binaries."""

    def test_ack_logger(self):
        report = inspect_plugin(build_plugin(ack_logger.NAME))
        exports = {e["export"]: e for e in report["exports"]}

        assert report["name"] == ack_logger.NAME
        assert set(exports) == {"init", "after_process_frame_2", "after_write_frame_2"}
        assert exports["after_write_frame_2"]["anchor"] == "AFTER"
        assert report["manifest_mismatch"] == []
        assert report["permissions"] == ["file"]
        assert not report["needs_negotiation"]

    def test_negotiated_plugin(self):
        report = inspect_plugin(build_plugin(dummy_frame.NAME))
        settings = config.plugins['dummy_frame']
        assert report["needs_negotiation"]
        assert report["frame_types"] == [f"0x{settings['frame_type']:x}"]
        assert report["tp_types"] == [f"0x{settings['tp_type']:x}"]

    def test_bad_export(self):
        with pytest.raises(BadExportName):
            inspect_plugin(testing.build_bad_export())

    def test_every_catalogue_plugin_is_consistent(self):
        for name in PLUGINS:
            report = inspect_plugin(build_plugin(name))
            assert report["name"] == name
            assert report["manifest_mismatch"] == [], name

    def test_write_plugins(self, tmp_path):
        written = write_plugins(tmp_path)
        assert set(written) == set(PLUGINS)
        for name, path in written.items():
            assert path.read_bytes() == build_plugin(name)


class TestAckLogger:
    """Test the ACK logger plugin."""

    def log_lines(self, host):
        path = host.engine.sandbox_root / ack_logger.NAME / config.plugins['ack_logger']['log_file']
        return path.read_text().splitlines() if path.exists() else []

    def test_logs_sent_and_received_acks(self, client, server):
        load(client, ack_logger.NAME)
        load(server, ack_logger.NAME)

        packet = client.send_frames([], [fr.Ack(largest_acked=7, ack_delay=0)])
        server.receive(packet.image)

        assert self.log_lines(client) == ["tx ACK largest=7"]
        assert self.log_lines(server) == ["rx ACK largest=7"]
        assert server.values[F.LARGEST_RX_PKT_NUM] == 7

    def test_wire_unchanged(self, client, server):
        load(client, ack_logger.NAME)
        ack = fr.Ack(largest_acked=300, ack_delay=25)
        assert client.send_frames([], [ack]).image == server.send_frames([], [ack]).image

    def test_other_frames_not_logged(self, client):
        load(client, ack_logger.NAME)
        client.send_frames([], [fr.Ping(), fr.MaxData(5000)])
        assert self.log_lines(client) == []

    def test_appends(self, client):
        load(client, ack_logger.NAME)
        for largest in (1, 2, 3):
            client.send_frames([], [fr.Ack(largest_acked=largest, ack_delay=0)])
        assert self.log_lines(client) == [f"tx ACK largest={n}" for n in (1, 2, 3)]

    def test_without_file_grant(self, client):
        client.load_plugin(build_plugin(ack_logger.NAME), PermissionSet.from_names(["read"]))
        packet = client.send_frames([], [fr.Ack(largest_acked=4, ack_delay=0)])
        assert packet is not None
        assert self.log_lines(client) == []


class TestPrivacyPadding:
    """Test padding to the MTU and the randomised send gaps."""

    def test_fills_to_mtu(self, client):
        load(client, privacy_padding.NAME)
        packet = client.send_frames(native_frames=[fr.Ping()])
        assert len(packet.image) == client.mtu
        assert isinstance(packet.frames[-1][0], fr.Padding)

    def test_halts_until_timer(self, client):
        load(client, privacy_padding.NAME)
        assert client.send_frames(native_frames=[fr.Ping()]) is not None

        assert client.send_frames(native_frames=[fr.Ping()]) is None
        assert client.halted

        base = config.plugins['privacy_padding']['base_delay_us']
        assert client.advance(2 * base + 1) == 1
        packet = client.send_frames(native_frames=[fr.Ping()])
        assert packet is not None
        assert len(packet.image) == client.mtu

    def test_toggle(self, client):
        load(client, privacy_padding.NAME)
        result = client.engine.plugin_control(privacy_padding.NAME, privacy_padding.OP_TOGGLE)
        assert result.outputs == [PluginVal.boolean(False)]

        packet = client.send_frames(native_frames=[fr.Ping()])
        assert len(packet.image) < client.mtu
        # no gap while disabled
        assert client.send_frames(native_frames=[fr.Ping()]) is not None

        state = client.engine.plugin_control(privacy_padding.NAME, privacy_padding.OP_STATE)
        assert state.outputs == [PluginVal.boolean(False)]
        result = client.engine.plugin_control(privacy_padding.NAME, privacy_padding.OP_TOGGLE)
        assert result.outputs == [PluginVal.boolean(True)]

    def test_zero_base_delay(self, client):
        load(client, privacy_padding.NAME)
        client.engine.plugin_control(privacy_padding.NAME, privacy_padding.OP_SET_BASE, [PluginVal.u64(0)])
        assert client.send_frames(native_frames=[fr.Ping()]) is not None
        # Uniform(0, 0): the timer is already due at the current instant
        assert client.advance(0) == 1
        assert client.send_frames(native_frames=[fr.Ping()]) is not None

    def test_delays_stay_in_range(self, client):
        load(client, privacy_padding.NAME)
        base = config.plugins['privacy_padding']['base_delay_us']
        for _ in range(20):
            assert client.send_frames(native_frames=[fr.Ping()]) is not None
            deadline = client.engine.next_deadline()
            assert client.now <= deadline <= client.now + 2 * base
            client.advance(deadline - client.now)


class TestProbePath:
    """Test path latency probing between two mock hosts."""

    def test_no_measurement_yet(self, client):
        load(client, probe_path.NAME)
        result = client.engine.plugin_control(probe_path.NAME, probe_path.OP_LATENCY)
        assert result.status == probe_path.NO_MEASUREMENT

    def test_nothing_sent_without_probe(self, client):
        load(client, probe_path.NAME)
        assert client.send_frames() is None

    def test_measures_latency(self, client, server):
        load(client, probe_path.NAME)
        assert client.engine.plugin_control(probe_path.NAME, probe_path.OP_PROBE).ok

        challenge = client.send_frames()
        assert isinstance(challenge.frames[0][0], fr.PathChallenge)
        server.receive(challenge.image)

        client.advance(40_000)
        response = server.send_frames([])
        assert isinstance(response.frames[0][0], fr.PathResponse)
        assert response.frames[0][0].data == challenge.frames[0][0].data
        client.receive(response.image)

        result = client.engine.plugin_control(probe_path.NAME, probe_path.OP_LATENCY)
        assert result.ok
        assert result.output(0, ValKind.DURATION).value == 40_000

    def test_slots_run_out(self, client):
        load(client, probe_path.NAME)
        for _ in range(config.plugins['probe_path']['max_probes']):
            assert client.engine.plugin_control(probe_path.NAME, probe_path.OP_PROBE).ok
        result = client.engine.plugin_control(probe_path.NAME, probe_path.OP_PROBE)
        assert result.status == probe_path.SLOTS_BUSY

    def test_unmatched_response_ignored(self, client, server):
        load(client, probe_path.NAME)
        client.receive(server.send_frames([], [fr.PathResponse(b"\x01" * 8)]).image)
        result = client.engine.plugin_control(probe_path.NAME, probe_path.OP_LATENCY)
        assert result.status == probe_path.NO_MEASUREMENT


class TestNegotiatedPlugin:
    """Test two-phase activation of the DUMMY frame plugin."""

    def test_enabled_by_negotiation(self, client, server):
        load(client, dummy_frame.NAME)
        load(server, dummy_frame.NAME)
        client.negotiate(server)
        assert client.engine.plugin(dummy_frame.NAME).phase == Phase.ENABLED
        assert server.engine.plugin(dummy_frame.NAME).phase == Phase.ENABLED

    def test_one_sided_stays_disabled(self, client, server):
        load(client, dummy_frame.NAME)
        client.negotiate(server)
        assert client.engine.plugin(dummy_frame.NAME).phase == Phase.PRE_NEGOTIATION
        assert client.send_frames() is None

    def test_one_frame_in_flight(self, client, server):
        load(client, dummy_frame.NAME)
        load(server, dummy_frame.NAME)
        client.negotiate(server)

        packet = client.send_frames()
        frame = packet.frames[0][0]
        assert isinstance(frame, fr.Extension)
        assert frame.frame_type == config.plugins['dummy_frame']['frame_type']
        parsed = server.receive(packet.image)
        assert [f.frame_type for f in parsed] == [frame.frame_type]

        assert client.send_frames() is None
        client.acknowledge(packet)
        assert client.send_frames() is not None

    def test_lost_frame_clears_flight(self, client, server):
        load(client, dummy_frame.NAME)
        load(server, dummy_frame.NAME)
        client.negotiate(server)
        packet = client.send_frames()
        client.acknowledge(packet, acknowledged=False)
        assert client.send_frames() is not None

    def test_toggles_padding_on_peer(self, client, server):
        load(client, dummy_frame.NAME)
        load(server, dummy_frame.NAME)
        load(server, privacy_padding.NAME)
        client.negotiate(server)

        every = config.plugins['dummy_frame']['toggle_every']
        for _ in range(every):
            packet = client.send_frames()
            server.receive(packet.image)
            client.acknowledge(packet)

        state = server.engine.plugin_control(privacy_padding.NAME, privacy_padding.OP_STATE)
        assert state.outputs == [PluginVal.boolean(False)]

    def test_toggle_without_padding_plugin(self, client, server):
        load(client, dummy_frame.NAME)
        load(server, dummy_frame.NAME)
        client.negotiate(server)
        for _ in range(config.plugins['dummy_frame']['toggle_every']):
            packet = client.send_frames()
            server.receive(packet.image)
            client.acknowledge(packet)
        assert server.engine.plugin(dummy_frame.NAME).phase == Phase.ENABLED


class TestMaxDataPlugin:
    """Test MAX_DATA handled by a plugin against the native path."""

    def test_same_wire_image(self, tmp_path):
        native_a, native_b = MockHost(sandbox_root=tmp_path), MockHost(is_server=True, sandbox_root=tmp_path)
        plugin_a, plugin_b = MockHost(sandbox_root=tmp_path), MockHost(is_server=True, sandbox_root=tmp_path)
        load(plugin_a, "max_data")
        load(plugin_b, "max_data")

        assert plugin_a.max_data_cycle(plugin_b) == native_a.max_data_cycle(native_b)
        assert plugin_b.values[F.MAX_TX_DATA] == native_b.values[F.MAX_TX_DATA] == 600_000 + 1_048_576
        assert plugin_a.values[F.MAX_RX_DATA] == native_a.values[F.MAX_RX_DATA] == 600_000 + 1_048_576

    def test_not_due(self, client):
        load(client, "max_data")
        assert client.send_frames([MAX_DATA]) is None

    def test_plugin_to_native_peer(self, client, server):
        load(client, "max_data")
        client.max_data_cycle(server)
        assert server.values[F.MAX_TX_DATA] == 600_000 + 1_048_576
