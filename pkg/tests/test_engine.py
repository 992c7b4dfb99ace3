#!/usr/bin/env python3
"""
Tests for the plugin engine against a mock host.

Tests plugin loading and the host API without a transport:
- Load-time rejection (names, fields, Define conflicts, bad modules)
- PluginControl staging of inputs and outputs
- Host API status codes under different grants
- File sandbox, timers and byte capabilities
- Fault isolation: traps, fuel exhaustion and memory faults
"""

import logging
import sys
from pathlib import Path

import pytest

# Add project root to Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.common.errors import (
    CapabilityRangeError,
    InvalidCapability,
    LoadRejected,
    NoSuchPlugin,
    NotAvailable,
    PluginPermissionError,
    RejectReason,
    RoutineAborted,
    StatusCode,
)
from src.common.fields import ConnectionField as F
from src.common.fields import host_profile_fields
from src.common.routines import Anchor, RoutineId, RoutineKind
from src.common.values import PluginVal, ValKind
from src.engine.permissions import PermissionSet
from src.engine.plugin import Phase
from src.netsim.mock_host import MockHost
from src.plugins import build_plugin, dummy_frame, testing

PROBER = "api_prober"


@pytest.fixture
def host(tmp_path):
    """Client-side mock host with its sandboxes under tmp_path."""
    # Suppress all output during tests for cleaner results
    logging.getLogger().setLevel(logging.CRITICAL)
    mock = MockHost(is_server=False, seed=3, sandbox_root=tmp_path)
    yield mock
    mock.engine.close()


def load(host, name, permissions=None):
    return host.load_plugin(build_plugin(name), permissions or PermissionSet.all())


def probe(host, op, *args):
    return host.engine.plugin_control(PROBER, op, list(args))


class TestLoading:
    """Test load-time validation."""

    def test_enabled_at_init(self, host):
        handle = load(host, "echo")
        assert handle.plugin_id == "echo"
        assert handle.phase == Phase.ENABLED
        assert host.engine.plugin("echo") is handle

    def test_negotiating_plugin_waits(self, host):
        handle = load(host, dummy_frame.NAME)
        assert handle.phase == Phase.PRE_NEGOTIATION
        with pytest.raises(NotAvailable):
            host.engine.plugin_control(dummy_frame.NAME, 1)

    def test_bad_export_name(self, host):
        with pytest.raises(LoadRejected) as exc:
            host.load_plugin(testing.build_bad_export(), PermissionSet.all())
        assert exc.value.reason == RejectReason.BAD_NAME
        assert host.engine.plugins == {}

    def test_missing_field(self, tmp_path):
        """A plugin needing CWND is refused by a host that only exposes connection and space fields."""
        minimal = MockHost(sandbox_root=tmp_path, supported_fields=host_profile_fields(["connection", "space"]))
        with pytest.raises(LoadRejected) as exc:
            minimal.load_plugin(testing.build_needs_field(F.CWND), PermissionSet.all())
        assert exc.value.reason == RejectReason.MISSING_FIELD
        assert "CWND" in str(exc.value)

        handle = minimal.load_plugin(testing.build_needs_field(F.RX_DATA), PermissionSet.all())
        assert handle.enabled

    def test_define_conflict(self, host):
        routine = RoutineId(RoutineKind.PROCESS_FRAME, 0x40)
        host.load_plugin(testing.build_single_hook("first", routine), PermissionSet.none())
        with pytest.raises(LoadRejected) as exc:
            host.load_plugin(testing.build_single_hook("second", routine), PermissionSet.none())
        assert exc.value.reason == RejectReason.DEFINE_CONFLICT
        assert host.engine.define_owner(routine) == "first"
        assert "second" not in host.engine.plugins

    def test_observers_never_conflict(self, host):
        routine = RoutineId(RoutineKind.PROCESS_FRAME, 0x40)
        host.load_plugin(testing.build_single_hook("definer", routine), PermissionSet.none())
        host.load_plugin(testing.build_single_hook("watcher_a", routine, Anchor.AFTER), PermissionSet.none())
        host.load_plugin(testing.build_single_hook("watcher_b", routine, Anchor.AFTER), PermissionSet.none())
        assert host.engine.provides(routine, Anchor.AFTER)

    def test_duplicate_id(self, host):
        load(host, "echo")
        with pytest.raises(LoadRejected) as exc:
            load(host, "echo")
        assert exc.value.reason == RejectReason.DEFINE_CONFLICT

    def test_not_a_module(self, host):
        with pytest.raises(LoadRejected) as exc:
            host.load_plugin(b"\x00asm\x01garbage", PermissionSet.all())
        assert exc.value.reason == RejectReason.BAD_MODULE

    def test_unknown_plugin(self, host):
        with pytest.raises(NoSuchPlugin):
            host.engine.plugin("missing")


class TestPluginControl:
    """Test input and output staging through PluginControl."""

    def test_echo_returns_inputs(self, host):
        load(host, "echo")
        args = [PluginVal.u64(1), PluginVal.raw(b"hi"), PluginVal.boolean(True)]
        result = host.engine.plugin_control("echo", 7, args)
        assert result.ok
        assert result.outputs == [PluginVal.u64(7)] + args

    def test_arith(self, host):
        load(host, "arith")
        result = host.engine.plugin_control("arith", 0, [PluginVal.u64(84), PluginVal.u64(2)])
        assert [v.value for v in result.outputs] == [86, 82, 168, 42]
        assert all(v.kind == ValKind.U64 for v in result.outputs)

    def test_arith_divide_by_zero(self, host):
        load(host, "arith")
        result = host.engine.plugin_control("arith", 0, [PluginVal.u64(5), PluginVal.u64(0)])
        assert result.output(3, ValKind.U64).value == 0

    def test_output_accessor(self, host):
        load(host, "empty")
        result = host.engine.plugin_control("empty", 0)
        assert result.outputs == []
        with pytest.raises(ValueError):
            result.output(0)

    def test_missing_target(self, host):
        with pytest.raises(NotAvailable):
            host.engine.plugin_control("nobody", 1)

    def test_unknown_op_status(self, host):
        load(host, PROBER)
        assert probe(host, 99).status == 99


class TestHostApi:
    """Test host API status codes as seen by plugin code."""

    def test_get_field(self, host):
        load(host, PROBER)
        result = probe(host, testing.PROBE_GET_FIELD, PluginVal.u64(int(F.CWND)))
        assert result.ok
        assert result.outputs == [PluginVal.u64(host.values[F.CWND])]

    def test_get_field_without_read(self, host):
        load(host, PROBER, PermissionSet.from_names(["file"]))
        result = probe(host, testing.PROBE_GET_FIELD, PluginVal.u64(int(F.CWND)))
        assert result.status == StatusCode.PERMISSION_ERROR

    def test_get_field_denied_field(self, host):
        load(host, PROBER, PermissionSet.from_names(["read"], field_deny={F.PEER_ADDR}))
        assert probe(host, testing.PROBE_GET_FIELD, PluginVal.u64(int(F.PEER_ADDR))).status == \
            StatusCode.PERMISSION_ERROR
        assert probe(host, testing.PROBE_GET_FIELD, PluginVal.u64(int(F.MTU))).ok

    def test_get_unsupported_field(self, tmp_path):
        minimal = MockHost(sandbox_root=tmp_path, supported_fields=host_profile_fields(["connection"]))
        load(minimal, PROBER)
        assert probe(minimal, testing.PROBE_GET_FIELD, PluginVal.u64(int(F.CWND))).status == \
            StatusCode.NOT_AVAILABLE
        assert probe(minimal, testing.PROBE_GET_FIELD, PluginVal.u64(0x30)).status == \
            StatusCode.NOT_AVAILABLE

    def test_set_field(self, host):
        load(host, PROBER)
        result = probe(host, testing.PROBE_SET_FIELD, PluginVal.u64(int(F.CWND)), PluginVal.u64(20000))
        assert result.ok
        assert host.values[F.CWND] == 20000

    def test_set_field_statuses(self, host):
        load(host, PROBER)
        # read-only field
        assert probe(host, testing.PROBE_SET_FIELD, PluginVal.u64(int(F.RX_DATA)),
                     PluginVal.u64(1)).status == StatusCode.PERMISSION_ERROR
        # IdleTimeout is a Duration, the prober writes U64
        assert probe(host, testing.PROBE_SET_FIELD, PluginVal.u64(int(F.IDLE_TIMEOUT)),
                     PluginVal.u64(1)).status == StatusCode.TYPE_MISMATCH

    def test_set_field_read_grant_only(self, host):
        load(host, PROBER, PermissionSet.from_names(["read"]))
        before = host.values[F.CWND]
        assert probe(host, testing.PROBE_SET_FIELD, PluginVal.u64(int(F.CWND)),
                     PluginVal.u64(1)).status == StatusCode.PERMISSION_ERROR
        assert host.values[F.CWND] == before

    def test_before_hook_is_read_only(self, host):
        """Mutating calls from a Before hook fail with PERMISSION_ERROR and change nothing."""
        load(host, PROBER)
        before = host.values[F.CWND]
        host.engine.observe(RoutineId(RoutineKind.SHOULD_SEND_FRAME, testing.PROBER_FRAME), Anchor.BEFORE)
        result = probe(host, testing.PROBE_BEFORE_STATUSES)
        assert [v.value for v in result.outputs] == [StatusCode.PERMISSION_ERROR] * 3
        assert host.values[F.CWND] == before
        assert host.engine.next_deadline() is None

    def test_register_frame_type(self, host):
        load(host, PROBER)
        assert probe(host, testing.PROBE_REGISTER_FRAME, PluginVal.u64(0xE5)).ok
        assert host.engine.registrations().frame_owner(0xE5) == PROBER

    def test_register_without_grant(self, host):
        load(host, PROBER, PermissionSet.from_names(["read"]))
        assert probe(host, testing.PROBE_REGISTER_FRAME, PluginVal.u64(0xE5)).status == \
            StatusCode.PERMISSION_ERROR

    def test_inputs(self, host):
        load(host, PROBER)
        result = probe(host, testing.PROBE_INPUT_COUNT, PluginVal.u64(1), PluginVal.u64(2))
        assert result.outputs == [PluginVal.u64(3)]
        assert probe(host, testing.PROBE_MISSING_INPUT).status == StatusCode.INPUT_MISSING

    def test_current_time(self, host):
        load(host, PROBER)
        host.advance(1234)
        assert probe(host, testing.PROBE_NOW).outputs == [PluginVal.instant(1234)]

    def test_self_control(self, host):
        load(host, PROBER)
        assert probe(host, testing.PROBE_SELF_CONTROL).status == StatusCode.NOT_AVAILABLE


class TestSandboxFiles:
    """Test the per-plugin file sandbox."""

    def test_write_then_read(self, host, tmp_path):
        load(host, PROBER)
        assert probe(host, testing.PROBE_FILE_WRITE).status == len(b"hello sandbox")
        assert (tmp_path / PROBER / "probe.txt").read_bytes() == b"hello sandbox"
        result = probe(host, testing.PROBE_FILE_READ)
        assert result.outputs == [PluginVal.raw(b"hello sandbox")]

    def test_read_missing_file(self, host):
        load(host, PROBER)
        assert probe(host, testing.PROBE_FILE_READ).status == StatusCode.NO_SUCH_FILE

    def test_escape_refused(self, host, tmp_path):
        load(host, PROBER)
        assert probe(host, testing.PROBE_FILE_ESCAPE).status == StatusCode.PERMISSION_ERROR
        assert not (tmp_path / "escape.txt").exists()

    def test_file_grant_required(self, host, tmp_path):
        load(host, PROBER, PermissionSet.from_names(["read"]))
        assert probe(host, testing.PROBE_FILE_WRITE).status == StatusCode.PERMISSION_ERROR
        assert not (tmp_path / PROBER / "probe.txt").exists()

    def test_sandboxes_are_per_plugin(self, host, tmp_path):
        load(host, PROBER)
        probe(host, testing.PROBE_FILE_WRITE)
        load(host, "echo")
        assert not (tmp_path / "echo" / "probe.txt").exists()


class TestTimers:
    """Test plugin timers on the host clock."""

    def test_timer_fires_once(self, host):
        load(host, PROBER)
        timer_id = probe(host, testing.PROBE_SET_TIMER, PluginVal.u64(5000), PluginVal.u64(42)).status
        assert timer_id >= 1
        assert host.engine.next_deadline() == 5000

        assert host.advance(4999) == 0
        assert host.advance(1) == 1
        assert host.advance(10000) == 0
        stats = probe(host, testing.PROBE_TIMER_STATS).outputs
        assert [v.value for v in stats] == [1, 42]

    def test_cancel(self, host):
        load(host, PROBER)
        timer_id = probe(host, testing.PROBE_SET_TIMER, PluginVal.u64(100), PluginVal.u64(1)).status
        assert probe(host, testing.PROBE_CANCEL_TIMER, PluginVal.u64(timer_id)).ok
        assert host.advance(1000) == 0
        assert probe(host, testing.PROBE_CANCEL_TIMER, PluginVal.u64(timer_id)).status == \
            StatusCode.NOT_AVAILABLE

    def test_timer_grant_required(self, host):
        load(host, PROBER, PermissionSet.from_names(["read"]))
        assert probe(host, testing.PROBE_SET_TIMER, PluginVal.u64(100), PluginVal.u64(1)).status == \
            StatusCode.PERMISSION_ERROR
        with pytest.raises(PluginPermissionError):
            host.engine.set_timer(PROBER, 100, 1)

    def test_timers_fire_in_deadline_order(self, host):
        load(host, PROBER)
        probe(host, testing.PROBE_SET_TIMER, PluginVal.u64(300), PluginVal.u64(3))
        probe(host, testing.PROBE_SET_TIMER, PluginVal.u64(100), PluginVal.u64(1))
        assert host.advance(500) == 2
        # the last callback to run carries the latest deadline
        assert probe(host, testing.PROBE_TIMER_STATS).outputs[1] == PluginVal.u64(3)


class TestCapabilities:
    """Test byte capabilities handed to plugins."""

    def test_read_through_capability(self, host):
        load(host, PROBER)
        cap = host.engine.bytes_expose(bytearray(b"abcdef"), 6, 0)
        result = probe(host, testing.PROBE_BYTES_READ, PluginVal.bytes_cap(cap))
        assert result.outputs == [PluginVal.raw(b"abcdef")]

    def test_write_through_capability(self, host):
        load(host, PROBER)
        buffer = bytearray(16)
        cap = host.engine.bytes_expose(buffer, 0, 8)
        result = probe(host, testing.PROBE_BYTES_WRITE, PluginVal.bytes_cap(cap), PluginVal.u64(5))
        assert result.ok
        assert buffer == bytearray(b"\xab" * 5 + bytes(11))

    def test_write_past_limit(self, host):
        load(host, PROBER)
        buffer = bytearray(16)
        cap = host.engine.bytes_expose(buffer, 0, 8)
        result = probe(host, testing.PROBE_BYTES_WRITE, PluginVal.bytes_cap(cap), PluginVal.u64(9))
        assert result.status == StatusCode.RANGE_ERROR
        assert buffer == bytearray(16)

    def test_revoked_after_invocation(self, host):
        load(host, PROBER)
        cap = host.engine.bytes_expose(bytearray(b"abc"), 3, 3)
        probe(host, testing.PROBE_BYTES_READ, PluginVal.bytes_cap(cap))
        assert host.engine.live_capabilities() == 0
        with pytest.raises(InvalidCapability):
            host.engine.bytes_read(cap.tag, 0, 1)
        result = probe(host, testing.PROBE_BYTES_READ, PluginVal.bytes_cap(cap))
        assert result.status == StatusCode.INVALID_CAPABILITY

    def test_table_bounds(self, host):
        cap = host.engine.bytes_expose(bytearray(10), 4, 100)
        assert cap.max_write_len == 10
        with pytest.raises(CapabilityRangeError):
            host.engine.bytes_read(cap.tag, 2, 3)
        with pytest.raises(CapabilityRangeError):
            host.engine.bytes_write(cap.tag, 8, b"xyz")
        second = host.engine.bytes_expose(bytearray(1), 1, 1)
        assert second.tag > cap.tag


class TestFaults:
    """Test that plugin faults are contained to the faulty plugin."""

    def test_trap_poisons_plugin(self, host):
        load(host, "fault_trap")
        load(host, "echo")
        with pytest.raises(RoutineAborted):
            host.engine.call_routine(RoutineId(RoutineKind.SHOULD_SEND_FRAME, testing.FAULT_FRAME_TRAP))
        assert "fault_trap" in host.engine.poisoned
        assert "fault_trap" not in host.engine.plugins
        with pytest.raises(NotAvailable):
            host.engine.plugin_control("fault_trap", 1)
        assert host.engine.plugin_control("echo", 1).ok

    def test_fuel_exhaustion(self, tmp_path):
        mock = MockHost(sandbox_root=tmp_path)
        mock.engine.fuel_per_call = 100_000
        load(mock, "fault_fuel")
        with pytest.raises(RoutineAborted):
            mock.engine.plugin_control("fault_fuel", 1)
        assert "fault_fuel" in mock.engine.poisoned
        assert mock.engine.define_owner(RoutineId(RoutineKind.SHOULD_SEND_FRAME, testing.FAULT_FRAME_FUEL)) is None

    def test_capability_overrun_is_a_status(self, host):
        load(host, "fault_oob")
        cap = host.engine.bytes_expose(bytearray(16), 0, 8)
        result = host.engine.plugin_control("fault_oob", 1, [PluginVal.bytes_cap(cap)])
        assert result.status == StatusCode.RANGE_ERROR
        assert host.engine.plugin("fault_oob").enabled

    def test_forged_tag(self, host):
        load(host, "fault_oob")
        assert host.engine.plugin_control("fault_oob", 2).status == StatusCode.INVALID_CAPABILITY

    def test_memory_fault_aborts(self, host):
        load(host, "fault_oob")
        with pytest.raises(RoutineAborted):
            host.engine.plugin_control("fault_oob", 3)
        assert "fault_oob" in host.engine.poisoned

    def test_oversized_transport_parameter_skipped(self, host):
        load(host, "fault_oob")
        assert host.transport_parameters() == []

    def test_detach(self, host):
        load(host, "echo")
        host.engine.detach("echo", "test")
        assert host.engine.poisoned["echo"] == "test"
        with pytest.raises(NotAvailable):
            host.engine.plugin_control("echo", 1)


class TestPermissions:
    """Test permission grant parsing."""

    def test_write_implies_read(self):
        grants = PermissionSet.from_names(["write"])
        assert grants.read_fields and grants.can_read(F.CWND)

    def test_profiles_and_lists(self):
        profiles = {"observer": ["read", "file"]}
        assert PermissionSet.parse("observer", profiles).names() == ["read", "file"]
        assert PermissionSet.parse("timer,control").names() == ["timer", "control"]
        assert PermissionSet.none().names() == []

    def test_unknown_grant(self):
        with pytest.raises(ValueError):
            PermissionSet.from_names(["root"])

    def test_field_allow_list(self):
        grants = PermissionSet.from_names(["read"], field_allow={F.RX_DATA})
        assert grants.can_read(F.RX_DATA)
        assert not grants.can_read(F.CWND)
