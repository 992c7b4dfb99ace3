#!/usr/bin/env python3
"""
Tests for the network simulation harness.

Tests the simulated link, the scenario runner and the experiment suites:
- Link rate, delay, queue and loss
- Seeded determinism and physical bounds of a transfer
- Completion under random loss
- Plugin loading in scenarios (two-phase activation, refusals)
- Every protocol plugin on every backend, and backend equivalence
- BDP resumption, padding and their cooperation
- Suite and benchmark outputs
"""

import json
import logging
import socket
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add project root to Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.common.errors import LoadRejected, RejectReason, ScenarioTimeout
from src.common.values import PluginVal
from src.config import config
from src.engine.plugin import Phase
from src.netsim import (
    CLIENT_TO_SERVER,
    LADDER,
    SERVER_TO_CLIENT,
    ControlAction,
    LinkModel,
    PluginSpec,
    ScenarioConfig,
    SuiteOptions,
    ladder_holds,
    run_benchmarks,
    run_scenario,
    run_suite,
)
from src.netsim.experiments import CwndWatch, ks_test, padded_fraction, read_bdp_record
from src.netsim.link import LinkDirection
from src.netsim.udp import UdpEndpoint, close_all, finish_client, parse_host_port, run_endpoints
from src.plugins import PLUGINS, ack_logger, bdp_frame, dummy_frame, privacy_padding, probe_path
from src.quic import BACKENDS, PacketKind, create_connection
from src.utils.output_utils import save_trace_csv

MTU = config.transport['mtu']
SMALL = 200_000


@pytest.fixture(autouse=True)
def quiet():
    # Suppress all output during tests for cleaner results
    logging.getLogger().setLevel(logging.CRITICAL)


def scenario(tmp_path, **kwargs):
    kwargs.setdefault("transfer_octets", SMALL)
    kwargs.setdefault("sandbox_root", tmp_path / "sandbox")
    return ScenarioConfig(**kwargs)


def both(*names):
    return {"client_plugins": [PluginSpec(n) for n in names],
            "server_plugins": [PluginSpec(n) for n in names]}


def wire(result):
    return [(r.direction, r.ts_us, r.len, r.types, r.kind) for r in result.trace]


def require_loopback():
    try:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(("127.0.0.1", 0))
        sock.close()
    except OSError:
        pytest.skip("loopback sockets unavailable")


class TestLink:
    """Test the bottleneck link model."""

    @pytest.mark.parametrize("kwargs", [
        {"rate_bps": 0, "one_way_delay_us": 10},
        {"rate_bps": 1e6, "one_way_delay_us": -1},
        {"rate_bps": 1e6, "one_way_delay_us": 10, "loss_prob": 1.5},
        {"rate_bps": 1e6, "one_way_delay_us": 10, "queue_packets": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LinkModel(**kwargs)

    def test_defaults_from_config(self):
        link = LinkModel.from_config()
        assert link.rate_bps == config.link['rate_bps']
        assert link.rtt_us == int(config.link['rtt_ms'] * 1000)
        # 50 Mbit/s over 40 ms in 1350-octet packets
        assert link.bdp_packets == 185
        assert link.capacity == link.bdp_packets
        assert LinkModel.from_config(queue_packets=20).capacity == 20

    def test_serialization_and_delay(self):
        link = LinkModel(rate_bps=10e6, one_way_delay_us=5000)
        direction = LinkDirection(link, SERVER_TO_CLIENT)
        assert link.serialization_us(1250) == pytest.approx(1000.0)
        assert direction.enqueue(1250, 0) == 6000
        # queued behind the first packet
        assert direction.enqueue(1250, 0) == 7000
        assert direction.enqueue(1250, 10_000) == 16_000

    def test_drop_tail(self):
        link = LinkModel(rate_bps=1e6, one_way_delay_us=0, queue_packets=2)
        direction = LinkDirection(link, CLIENT_TO_SERVER)
        assert direction.enqueue(1000, 0) is not None
        assert direction.enqueue(1000, 0) is not None
        assert direction.enqueue(1000, 0) is None
        assert direction.stats() == {"delivered": 2, "dropped_queue": 1, "dropped_random": 0}
        # the first packet has left by 8 ms
        assert direction.enqueue(1000, 8000) is not None

    def test_random_loss_is_seeded(self):
        link = LinkModel(rate_bps=1e9, one_way_delay_us=0, loss_prob=0.3, seed=5)

        def pattern():
            direction = LinkDirection(link, SERVER_TO_CLIENT)
            return [direction.enqueue(100, t * 1000) is None for t in range(200)]

        first = pattern()
        assert first == pattern()
        assert 0.15 < np.mean(first) < 0.45

    def test_directions_independent(self):
        link = LinkModel(rate_bps=1e9, one_way_delay_us=0, loss_prob=0.5, seed=5)
        c2s, s2c = LinkDirection(link, CLIENT_TO_SERVER), LinkDirection(link, SERVER_TO_CLIENT)
        assert [c2s.enqueue(100, t) is None for t in range(64)] != \
               [s2c.enqueue(100, t) is None for t in range(64)]


class TestScenario:
    """Test the scenario runner without plugins."""

    def test_deterministic(self, tmp_path):
        link = LinkModel.from_config(loss_prob=0.01, seed=3)
        first = run_scenario(scenario(tmp_path, link=link, seed=4))
        second = run_scenario(scenario(tmp_path, link=link, seed=4))
        assert wire(first) == wire(second)
        assert first.summary() == second.summary()

    def test_physical_bounds(self, tmp_path):
        link = LinkModel.from_config(rate_bps=10e6, rtt_ms=60)
        result = run_scenario(scenario(tmp_path, link=link))
        floor_us = SMALL * 8 / link.rate_bps * 1e6 + link.rtt_us
        assert result.transfer_time_us >= floor_us
        goodput = SMALL * 8 / (result.transfer_time_us / 1e6)
        assert goodput <= link.rate_bps

    def test_handshake_takes_a_round_trip(self, tmp_path):
        link = LinkModel.from_config(rtt_ms=80)
        result = run_scenario(scenario(tmp_path, link=link))
        assert result.handshake_us >= link.rtt_us
        initials = result.records(kind=PacketKind.INITIAL.name)
        assert initials[0].direction == CLIENT_TO_SERVER
        assert all(r.len == config.transport['initial_packet_size'] for r in initials)

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_completes_under_loss(self, backend, tmp_path):
        link = LinkModel.from_config(loss_prob=0.05, seed=9)
        result = run_scenario(scenario(tmp_path, link=link, client_backend=backend, server_backend=backend))
        assert result.link_stats[SERVER_TO_CLIENT]["dropped_random"] > 0
        assert result.summary()["retx_count"] > 0
        assert result.server_stats["retransmissions"] > 0

    def test_queue_overflow_recovers(self, tmp_path):
        link = LinkModel.from_config(rate_bps=5e6, rtt_ms=40, queue_packets=5)
        result = run_scenario(scenario(tmp_path, link=link, transfer_octets=400_000))
        assert result.link_stats[SERVER_TO_CLIENT]["dropped_queue"] > 0
        assert result.transfer_time_us > 0

    def test_timeout(self, tmp_path):
        link = LinkModel.from_config(loss_prob=1.0)
        with pytest.raises(ScenarioTimeout) as exc:
            run_scenario(scenario(tmp_path, link=link, virtual_timeout_us=2_000_000))
        assert isinstance(exc.value.trace, pd.DataFrame)

    def test_summary_and_trace(self, tmp_path):
        result = run_scenario(scenario(tmp_path))
        summary = result.summary()
        assert summary["pkt_count"] == len(result.trace)
        assert sum(summary["histogram"].values()) == len(result.trace)
        assert summary["transfer_octets"] == SMALL
        assert summary["inter_departure_us"]["median"] is not None

        path = save_trace_csv(result, str(tmp_path / "out" / "trace.csv"))
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["direction", "ts_us", "len", "types", "kind"]
        assert len(frame) == len(result.trace)


class TestPluginLoading:
    """Test plugin loading inside scenarios."""

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    @pytest.mark.parametrize("seed", range(1, 21))
    def test_one_sided_negotiation_stays_disabled(self, backend, seed, tmp_path):
        """Odd seeds load BDP on the client only, even seeds on the server only."""
        side = "client" if seed % 2 else "server"
        phases = {}

        def watch(now, client, server):
            conn = client if side == "client" else server
            phases[side] = conn.engine.plugin(bdp_frame.NAME).phase

        cfg = scenario(tmp_path, client_backend=backend, server_backend=backend, seed=seed,
                       transfer_octets=50_000, **{f"{side}_plugins": [PluginSpec(bdp_frame.NAME)]})
        result = run_scenario(cfg, watch)
        assert phases[side] == Phase.PRE_NEGOTIATION
        bdp_type = config.plugins['bdp_frame']['frame_type']
        assert bdp_type == 0xBD
        assert sum(r.types.count(bdp_type) for r in result.trace) == 0

    def test_both_sides_enable(self, tmp_path):
        phases = {}

        def watch(now, client, server):
            phases["client"] = client.engine.plugin(bdp_frame.NAME).phase
            phases["server"] = server.engine.plugin(bdp_frame.NAME).phase

        run_scenario(scenario(tmp_path, **both(bdp_frame.NAME)), watch)
        assert phases == {"client": Phase.ENABLED, "server": Phase.ENABLED}

    def test_refused_plugin_continues_natively(self, tmp_path):
        cfg = scenario(tmp_path, client_host_profile="minimal", client_plugins=[PluginSpec(bdp_frame.NAME)])
        result = run_scenario(cfg)
        assert result.rejected == {f"client:{bdp_frame.NAME}": RejectReason.MISSING_FIELD.value}
        assert result.summary()["rejected"] == result.rejected

    def test_strict_loading(self, tmp_path):
        cfg = scenario(tmp_path, client_host_profile="minimal", strict_loading=True,
                       client_plugins=[PluginSpec(bdp_frame.NAME)])
        with pytest.raises(LoadRejected) as exc:
            run_scenario(cfg)
        assert exc.value.reason == RejectReason.MISSING_FIELD

    def test_controls(self, tmp_path):
        controls = [
            ControlAction(at_us=100_000, side="server", plugin=privacy_padding.NAME,
                          op=privacy_padding.OP_TOGGLE),
            ControlAction(at_us=100_000, side="client", plugin="nobody", op=1),
        ]
        result = run_scenario(scenario(tmp_path, controls=controls, transfer_octets=SMALL + 7,
                                     **both(privacy_padding.NAME)))
        toggle, missing = result.control_log
        assert toggle["status"] == 0
        assert toggle["outputs"] == [str(PluginVal.boolean(False))]
        assert missing["status"] is None
        assert "NotAvailable" in missing["error"]
        late = [r.len for r in result.records(SERVER_TO_CLIENT, PacketKind.ONE_RTT.name)
                if r.ts_us > 100_000]
        assert any(n < MTU for n in late)


class TestPluginMatrix:
    """Every protocol plugin, built once, on every backend."""

    @pytest.mark.parametrize("name", sorted(PLUGINS))
    def test_backends_produce_same_wire(self, name, tmp_path):
        """The same binary drives both backends to the same packet sequence."""
        results = [run_scenario(scenario(tmp_path / backend, client_backend=backend, server_backend=backend,
                                         seed=6, **both(name)))
                   for backend in sorted(BACKENDS)]
        assert wire(results[0]) == wire(results[1])

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_ack_logger(self, backend, tmp_path):
        cfg = scenario(tmp_path, client_backend=backend, server_backend=backend, **both(ack_logger.NAME))
        run_scenario(cfg)
        log_file = config.plugins['ack_logger']['log_file']
        client_log = (tmp_path / "sandbox" / "client" / ack_logger.NAME / log_file).read_text()
        server_log = (tmp_path / "sandbox" / "server" / ack_logger.NAME / log_file).read_text()
        assert "tx ACK largest=" in client_log
        assert "rx ACK largest=" in server_log

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_privacy_padding(self, backend, tmp_path):
        cfg = scenario(tmp_path, client_backend=backend, server_backend=backend, **both(privacy_padding.NAME))
        result = run_scenario(cfg)
        assert padded_fraction(result, MTU) == 1.0
        assert all(r.len == config.transport['initial_packet_size']
                   for r in result.records(kind=PacketKind.INITIAL.name))

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_probe_path(self, backend, tmp_path):
        controls = [
            ControlAction(at_us=100_000, side="client", plugin=probe_path.NAME, op=probe_path.OP_PROBE),
            ControlAction(at_us=400_000, side="client", plugin=probe_path.NAME, op=probe_path.OP_LATENCY),
        ]
        cfg = scenario(tmp_path, client_backend=backend, server_backend=backend, controls=controls,
                       transfer_octets=4_000_000, client_plugins=[PluginSpec(probe_path.NAME)])
        result = run_scenario(cfg)
        probe, latency = result.control_log
        assert probe["status"] == 0
        assert latency["status"] == 0
        assert any(0x1A in r.types for r in result.records(CLIENT_TO_SERVER))
        assert any(0x1B in r.types for r in result.records(SERVER_TO_CLIENT))

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_dummy_frame(self, backend, tmp_path):
        cfg = scenario(tmp_path, client_backend=backend, server_backend=backend, **both(dummy_frame.NAME))
        result = run_scenario(cfg)
        dummy = config.plugins['dummy_frame']['frame_type']
        for direction in (CLIENT_TO_SERVER, SERVER_TO_CLIENT):
            assert any(dummy in r.types for r in result.records(direction))

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_bdp_frame_negotiates(self, backend, tmp_path):
        phases = {}

        def watch(now, client, server):
            phases[now > 0] = server.engine.plugin(bdp_frame.NAME).phase

        cfg = scenario(tmp_path, client_backend=backend, server_backend=backend, **both(bdp_frame.NAME))
        run_scenario(cfg, watch)
        assert phases[True] == Phase.ENABLED

    def test_cross_backend(self, tmp_path):
        cfg = scenario(tmp_path, client_backend="alpha", server_backend="beta", **both(privacy_padding.NAME))
        result = run_scenario(cfg)
        assert padded_fraction(result, MTU) == 1.0

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_ack_writer_keeps_wire(self, backend, tmp_path):
        """ACKs written by a plugin Define match the native images exactly."""
        native = run_scenario(scenario(tmp_path / "native", client_backend=backend, server_backend=backend,
                                       seed=6))
        written = run_scenario(scenario(tmp_path / "plugin", client_backend=backend, server_backend=backend,
                                        seed=6, client_plugins=[PluginSpec("ack_writer")]))
        assert wire(written) == wire(native)
        assert any(0x02 in r.types for r in written.records(CLIENT_TO_SERVER))


class TestBdpResumption:
    """Test that a saved BDP report speeds up the next connection."""

    def test_resumed_connection_starts_with_saved_cwnd(self, tmp_path):
        link = LinkModel.from_config(rate_bps=10e6, rtt_ms=100, queue_packets=20, seed=2)
        sandbox = tmp_path / "bdp"

        def cfg():
            return ScenarioConfig(link=link, transfer_octets=3_000_000, seed=2, sandbox_root=sandbox,
                                  **both(bdp_frame.NAME))

        cold = run_scenario(cfg())
        bdp_type = config.plugins['bdp_frame']['frame_type']
        assert any(bdp_type in r.types for r in cold.records(SERVER_TO_CLIENT))

        record = read_bdp_record(sandbox / "client")
        assert record is not None
        assert record["identity"] == "10-0-0-2-4433"
        assert record["cwnd"] > 10 * MTU
        assert record["rtt_us"] >= link.rtt_us

        ceiling = config.plugins['bdp_frame']['ceiling_octets']
        watch = CwndWatch(min(record["cwnd"], ceiling), link.rtt_us)
        resumed = run_scenario(cfg(), watch)
        assert watch.matched
        assert resumed.transfer_time_us < cold.transfer_time_us

    def test_no_record_without_report(self, tmp_path):
        assert read_bdp_record(tmp_path) is None


class TestSuites:
    """Test the experiment suites with reduced sizes."""

    def test_privacy(self, tmp_path):
        options = SuiteOptions(runs=2, transfer_octets=100_000, charts=False)
        summary = run_suite("privacy", tmp_path, options)
        assert summary["timeouts"] == 0
        assert summary["padded_fraction_min"] == 1.0
        assert summary["initials_at_min_size"]
        assert summary["ks"]["statistic"] is not None
        assert (tmp_path / "privacy_runs.csv").exists()
        saved = json.loads((tmp_path / "privacy_summary.json").read_text())
        assert saved["suite"] == "privacy"
        runs = pd.read_csv(tmp_path / "privacy_runs.csv")
        assert sorted(runs["variant"].unique()) == ["baseline", "padded"]

    def test_combined(self, tmp_path):
        """The client padding toggles about every four round trips from about 400 ms on."""
        options = SuiteOptions(runs=1, transfer_octets=8_000_000, charts=False)
        summary = run_suite("combined", tmp_path, options)
        assert summary["dummy_bound_holds"]
        assert summary["min_toggles_in_window"] >= 3
        first = summary["first_toggle_us"][0]
        assert first is not None and 300_000 <= first <= 500_000
        assert summary["first_toggle_band_ms"] == [300, 500]
        assert summary["first_toggle_in_band"]
        runs = pd.read_csv(tmp_path / "combined_runs.csv")
        assert bool(runs["first_toggle_in_band"].iloc[0])

    def test_privacy_chart(self, tmp_path):
        run_suite("privacy", tmp_path, SuiteOptions(runs=1, transfer_octets=50_000))
        assert (tmp_path / "privacy_sizes.png").exists()

    def test_in_memory(self):
        summary = run_suite("privacy", None, SuiteOptions(runs=1, transfer_octets=50_000))
        assert summary["runs"] == 1

    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            run_suite("latency")

    def test_ks(self):
        rng = np.random.default_rng(0)
        same = ks_test(rng.normal(size=300), rng.normal(size=300))
        assert not same["exceeds_1pct"]
        shifted = ks_test(rng.normal(size=300), rng.normal(loc=2.0, size=300))
        assert shifted["exceeds_1pct"]
        assert shifted["critical_1pct"] == pytest.approx(1.628 * np.sqrt(600 / 90_000))
        assert ks_test(np.array([]), np.array([1.0]))["statistic"] is None


class TestBenchmarks:
    """Test the micro-benchmark ladder with tiny sample counts."""

    def test_ladder(self, tmp_path):
        results = run_benchmarks(iterations=3, warmup_s=0.0, inner_calls=2, sandbox_root=tmp_path)
        assert list(results) == list(LADDER)
        for result in results.values():
            assert result.samples == 3
            assert result.median_ns > 0
            assert result.p10_ns <= result.median_ns <= result.p90_ns
        assert results["A"].median_ns < results["D"].median_ns
        assert results["F"].median_ns < results["G"].median_ns
        assert set(ladder_holds(results)) == {"A<B<C<D", "E<F", "G>=100F"}

    def test_only(self, tmp_path):
        results = run_benchmarks(iterations=2, warmup_s=0.0, inner_calls=1, only=["A", "E"],
                                 sandbox_root=tmp_path)
        assert list(results) == ["A", "E"]
        assert set(ladder_holds(results)) == set()


class TestUdp:
    """Test a transfer over real loopback sockets."""

    def test_parse_host_port(self):
        assert parse_host_port("10.0.0.1:4433") == ("10.0.0.1", 4433)
        assert parse_host_port(":9000") == ("127.0.0.1", 9000)
        with pytest.raises(ValueError):
            parse_host_port("localhost")

    def test_loopback_transfer(self, tmp_path):
        require_loopback()
        server = create_connection("beta", "server", sandbox_root=tmp_path / "server")
        client = create_connection("alpha", "client", sandbox_root=tmp_path / "client")
        server.send_stream_data(length=100_000)
        server_end = UdpEndpoint(server, "127.0.0.1:0")
        host, port = server_end.address
        client_end = UdpEndpoint(client, "127.0.0.1:0", peer=f"{host}:{port}")
        endpoints = [server_end, client_end]
        try:
            client.connect(0)
            elapsed = run_endpoints(endpoints, lambda: client.transfer_complete, timeout_s=30.0)
            finish_client(client_end)
        finally:
            close_all(endpoints)
        assert client.recv_stream.final_size == 100_000
        assert elapsed > 0
        assert client_end.datagrams_received > 0

    @pytest.mark.parametrize("backend", sorted(BACKENDS))
    def test_padded_close_over_udp(self, backend, tmp_path):
        """A client running privacy padding sends its close as a full-size OneRtt datagram."""
        require_loopback()
        server = create_connection(backend, "server", sandbox_root=tmp_path / "server")
        client = create_connection(backend, "client", sandbox_root=tmp_path / "client")
        client.load_plugin(*PluginSpec(privacy_padding.NAME).resolve())
        server.send_stream_data(length=20_000)
        sent = []
        original = client.send_packets

        def recording(now):
            packets = original(now)
            sent.extend(packets)
            return packets

        client.send_packets = recording
        server_end = UdpEndpoint(server, "127.0.0.1:0")
        host, port = server_end.address
        client_end = UdpEndpoint(client, "127.0.0.1:0", peer=f"{host}:{port}")
        endpoints = [server_end, client_end]
        try:
            client.connect(0)
            run_endpoints(endpoints, lambda: client.transfer_complete, timeout_s=30.0)
            finish_client(client_end)
            for _ in range(100):
                server_end.receive(server.now)
                if server.closed:
                    break
                time.sleep(0.01)
        finally:
            close_all(endpoints)
        close = sent[-1]
        assert 0x1C in close.frame_types
        assert close.kind == PacketKind.ONE_RTT
        assert len(close) == MTU
        assert not client.closing
        assert server.closed
        assert server.close_code == 0
