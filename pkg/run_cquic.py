#!/usr/bin/env python3
"""
Core QUIC plugin toolkit: build and inspect plugins, run transfers, run the
experiment suites and the micro-benchmarks.

Subcommands:
    build       Write the protocol plugin binaries as .wasm files
    inspect     Report a plugin's hook exports, registrations and required fields
    run         One transfer, on the simulated link (netsim) or over UDP
    experiment  A built-in suite: privacy, bdp or combined
    bench       The plugin micro-benchmark ladder

Usage Examples:
    python run_cquic.py build --out outputs/plugins
    python run_cquic.py inspect outputs/plugins/ack_logger.wasm
    python run_cquic.py run --plugin bdp_frame --peer-plugin bdp_frame --rtt 500 --size 20000000
    python run_cquic.py run --plugin privacy_padding --control privacy_padding:1@200
    python run_cquic.py run --mode udp --role server --bind 127.0.0.1:4433 --size 1000000
    python run_cquic.py run --mode udp --role client --peer 127.0.0.1:4433
    python run_cquic.py experiment privacy --runs 30 --seed 7 --out outputs/privacy
    python run_cquic.py bench --out outputs/bench.json

Plugins are given as a path to a .wasm file or as a catalogue name. Settings
can also come from a key=value file passed with --config; flags win.

Exit Codes:
    0  success
    1  invalid arguments or unexpected failure
    2  plugin invalid (bad export name, malformed module, unknown plugin)
    3  plugin load rejected
    4  scenario timeout
"""

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add project root to Python path for imports
sys.path.insert(0, str(Path(__file__).parent))

from src.common.errors import BadExportName, CoreQuicError, LoadRejected, ScenarioTimeout
from src.common.values import PluginVal
from src.config import config
from src.engine.permissions import PermissionSet
from src.netsim.benchmarks import LADDER, format_ns, ladder_holds, run_benchmarks
from src.netsim.experiments import SUITES, SuiteOptions, run_suite
from src.netsim.scenario import ControlAction, PluginSpec, ScenarioConfig, run_scenario
from src.netsim.udp import UdpEndpoint, close_all, finish_client, run_endpoints
from src.plugins import PLUGINS, build_plugin, write_plugins
from src.quic import create_connection
from src.sdk.binary import read_manifest
from src.sdk.inspect import inspect_plugin
from src.utils.output_utils import (
    DEFAULT_OUTPUT_DIR,
    create_output_summary,
    save_benchmarks,
    save_summary_json,
    save_trace_csv,
)
from src.utils.run_config import DEFAULT_TRANSFER_OCTETS, RunConfig, build_run_config, parse_control

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PLUGIN_INVALID = 2
EXIT_LOAD_REJECTED = 3
EXIT_TIMEOUT = 4

logger = logging.getLogger("run_cquic")


class PluginInvalid(Exception):
    """A --plugin argument names neither a readable file nor a catalogue plugin."""


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def print_header(title: str, details: Dict[str, Any]) -> None:
    separator = "=" * 70
    print(f"\n{separator}")
    print(f"🚀 CORE QUIC - {title}")
    print(separator)
    for key, value in details.items():
        print(f"   {key}: {value}")
    print(separator)


# ----------------------------------------------------------------------
# Plugin arguments
# ----------------------------------------------------------------------

def plugin_spec(ref: str, permissions: Optional[str]) -> PluginSpec:
    """
    Resolve a --plugin argument.

    Args:
        ref: Path to a .wasm file, or a catalogue name
        permissions: Profile name or comma list; None keeps the manifest permissions
    """
    path = Path(ref)
    if path.is_file():
        binary = path.read_bytes()
        name = (read_manifest(binary) or {}).get("name") or path.stem
    else:
        try:
            binary = build_plugin(ref)
        except KeyError as e:
            raise PluginInvalid(f"'{ref}' is neither a plugin file nor a known plugin") from e
        name = ref
    granted = PermissionSet.parse(permissions, config.permission_profiles) if permissions else None
    return PluginSpec(name, binary, granted)


def control_actions(cfg: RunConfig, side: str) -> List[ControlAction]:
    actions = []
    for spec in cfg.control:
        parsed = parse_control(spec)
        actions.append(ControlAction(
            at_us=int(parsed['at_ms'] * 1000),
            side=side,
            plugin=parsed['plugin'],
            op=parsed['op'],
            args=tuple(PluginVal.u64(a) for a in parsed['args']),
        ))
    return actions


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def cmd_build(cfg: RunConfig, names: List[str]) -> int:
    out_dir = Path(cfg.out) if cfg.out else config.plugin_build_dir
    unknown = [n for n in names if n not in PLUGINS]
    if unknown:
        raise PluginInvalid(f"Unknown plugins {unknown}. Available: {sorted(PLUGINS)}")
    written = write_plugins(out_dir, names or None)
    for name, path in written.items():
        print(f"✅ {name}: {path} ({path.stat().st_size} octets)")
    return EXIT_OK


def cmd_inspect(plugin_path: str) -> int:
    path = Path(plugin_path)
    if not path.is_file():
        raise FileNotFoundError(f"Plugin file not found: {plugin_path}")
    try:
        report = inspect_plugin(path.read_bytes())
    except BadExportName as e:
        print(f"❌ BadExportName: {e}")
        return EXIT_PLUGIN_INVALID
    except LoadRejected as e:
        print(f"❌ {e.reason.value}: {e.detail}")
        return EXIT_PLUGIN_INVALID

    print(f"🔎 {report['name'] or path.stem} ({report['size']} octets)")
    print("   Exports:")
    for entry in report['exports']:
        print(f"     {entry['export']:<36} -> {entry['routine']}, {entry['anchor']}")
    print(f"   Frame types: {', '.join(report['frame_types']) or '-'}")
    print(f"   Transport parameters: {', '.join(report['tp_types']) or '-'}")
    print(f"   Required fields: {', '.join(report['required_fields']) or '-'}")
    print(f"   Permissions: {', '.join(report['permissions']) or '-'}")
    if report['manifest_mismatch']:
        print(f"⚠️  Manifest and exports disagree on: {', '.join(report['manifest_mismatch'])}")
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    if cfg.mode == "udp":
        return run_udp(cfg)
    return run_netsim(cfg)


def run_netsim(cfg: RunConfig) -> int:
    local = [plugin_spec(ref, cfg.permissions) for ref in cfg.plugin]
    remote = [plugin_spec(ref, cfg.permissions) for ref in cfg.peer_plugin]
    is_client = cfg.role == "client"
    scenario = ScenarioConfig(
        client_backend=cfg.backend if is_client else cfg.peer_backend,
        server_backend=cfg.peer_backend if is_client else cfg.backend,
        client_plugins=local if is_client else remote,
        server_plugins=remote if is_client else local,
        client_host_profile=cfg.host_profile if is_client else None,
        server_host_profile=None if is_client else cfg.host_profile,
        link=cfg.link_model(),
        transfer_octets=cfg.size or DEFAULT_TRANSFER_OCTETS,
        seed=cfg.seed,
        mtu=cfg.mtu,
        controls=control_actions(cfg, cfg.role),
        sandbox_root=Path(cfg.sandbox) if cfg.sandbox else None,
        strict_loading=True,
    )
    print_header("NETSIM TRANSFER", {
        "Role (local)": f"{cfg.role} on {cfg.backend}",
        "Peer": cfg.peer_backend,
        "Link": f"{scenario.link.rate_bps / 1e6:g} Mbit/s, {scenario.link.rtt_us / 1000:g} ms RTT, "
                f"queue {scenario.link.capacity}, loss {scenario.link.loss_prob:g}",
        "Transfer": f"{scenario.transfer_octets} octets",
        "Plugins": f"local {[s.name for s in local]}, peer {[s.name for s in remote]}",
        "Seed": cfg.seed,
    })

    try:
        result = run_scenario(scenario)
    except ScenarioTimeout as e:
        if cfg.out and e.trace is not None:
            path = Path(cfg.out) / "trace_timeout.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            e.trace.to_csv(path, index=False)
        raise

    summary = result.summary()
    summary['controls'] = result.control_log
    if cfg.out:
        trace_path = save_trace_csv(result, str(Path(cfg.out) / "trace.csv"))
        summary_path = save_summary_json(summary, str(Path(cfg.out) / "summary.json"))
        print(f"📄 Trace saved to: {trace_path}")
        print(f"📄 Summary saved to: {summary_path}")
    print(json.dumps(summary, indent=2, default=str))
    return EXIT_OK


def run_udp(cfg: RunConfig) -> int:
    sandbox = Path(cfg.sandbox) if cfg.sandbox else config.sandbox_dir / "udp"
    conn = create_connection(cfg.backend, cfg.role, host_profile=cfg.host_profile, mtu=cfg.mtu,
                             seed=cfg.seed, sandbox_root=sandbox / cfg.role)
    # Loading completes before any datagram is sent
    for spec in (plugin_spec(ref, cfg.permissions) for ref in cfg.plugin):
        binary, permissions = spec.resolve()
        conn.load_plugin(binary, permissions)
        print(f"🧩 Loaded {spec.name}")

    endpoint = UdpEndpoint(conn, cfg.bind, cfg.peer)
    pending = sorted(control_actions(cfg, cfg.role), key=lambda a: a.at_us)
    control_log: List[Dict[str, Any]] = []

    def fire_controls() -> None:
        while pending and conn.established and conn.now >= pending[0].at_us:
            action = pending.pop(0)
            entry = {"plugin": action.plugin, "op": action.op}
            try:
                result = conn.plugin_control(action.plugin, action.op, action.args)
                entry.update(status=result.status, outputs=[str(v) for v in result.outputs])
            except CoreQuicError as e:
                entry.update(status=None, error=f"{type(e).__name__}: {e}")
            control_log.append(entry)
            print(f"🎛️  {action.plugin} op={action.op} -> {entry}")

    if cfg.role == "server":
        conn.send_stream_data(length=cfg.size or DEFAULT_TRANSFER_OCTETS)
        host, port = endpoint.address
        print(f"📡 Listening on {host}:{port}")

        def done() -> bool:
            fire_controls()
            return conn.closed
    else:
        conn.connect(0)
        print(f"📡 Connecting from {endpoint.address[0]}:{endpoint.address[1]} to {cfg.peer}")

        def done() -> bool:
            fire_controls()
            return conn.transfer_complete

    try:
        elapsed = run_endpoints([endpoint], done, timeout_s=cfg.timeout)
        if cfg.role == "client":
            finish_client(endpoint)
    finally:
        close_all([endpoint])

    summary = {
        "role": cfg.role,
        "backend": cfg.backend,
        "elapsed_s": elapsed,
        "received_octets": conn.recv_stream.highest,
        "datagrams_sent": endpoint.datagrams_sent,
        "datagrams_received": endpoint.datagrams_received,
        "stats": dict(conn.stats),
        "controls": control_log,
    }
    if cfg.role == "client" and elapsed > 0:
        summary["goodput_mbps"] = conn.recv_stream.highest * 8 / elapsed / 1e6
    if cfg.out:
        print(f"📄 Summary saved to: {save_summary_json(summary, str(Path(cfg.out) / f'{cfg.role}_summary.json'))}")
    print(json.dumps(summary, indent=2, default=str))
    return EXIT_OK


def cmd_experiment(cfg: RunConfig, name: str) -> int:
    if name == "bench":
        return cmd_bench(cfg)
    out_dir = Path(cfg.out) if cfg.out else Path(DEFAULT_OUTPUT_DIR) / name
    options = SuiteOptions(
        runs=cfg.runs,
        seed=cfg.seed,
        transfer_octets=cfg.size,
        rate_bps=cfg.rate * 1e6 if cfg.rate is not None else None,
        rtt_ms=cfg.rtt,
        queue_packets=cfg.queue,
        loss_prob=cfg.loss,
        mtu=cfg.mtu,
        charts=cfg.charts,
    )
    if cfg.backends:
        options.backends = list(cfg.backends)
    print_header(f"EXPERIMENT {name.upper()}", {
        "Runs": cfg.runs or config.experiments[name]['runs'],
        "Seed": cfg.seed,
        "Backends": options.backends,
        "Output": out_dir,
    })
    summary = run_suite(name, out_dir, options)
    print(create_output_summary(f"{name} suite", summary))
    print(f"📁 Results in {out_dir}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    out_path = Path(cfg.out) if cfg.out else Path(DEFAULT_OUTPUT_DIR) / "bench.json"
    print_header("BENCHMARKS", {
        "Iterations": cfg.iterations or config.benchmarks['iterations'],
        "Warm-up": f"{config.benchmarks['warmup_s'] if cfg.warmup is None else cfg.warmup}s",
        "Selection": cfg.only or list(LADDER),
    })
    results = run_benchmarks(iterations=cfg.iterations, warmup_s=cfg.warmup, only=cfg.only or None,
                             sandbox_root=Path(cfg.sandbox) if cfg.sandbox else None)
    for name, result in results.items():
        print(f"   {name}  {result.description:<52} {format_ns(result.median_ns):>12}")
    for check, holds in ladder_holds(results).items():
        print(f"   {'✅' if holds else '⚠️ '} {check}")
    print(f"📄 Benchmarks saved to: {save_benchmarks(results, str(out_path))}")
    return EXIT_OK


# ----------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="key=value settings file; flags override it")
    common.add_argument("--seed", type=int, default=None, help="Seed for links, connections and plugins")
    common.add_argument("--out", type=str, default=None, help="Output file or directory")
    common.add_argument("--mtu", type=int, default=None, help="Packet size limit in octets")
    common.add_argument("--rate", type=float, default=None, help="Link rate in Mbit/s")
    common.add_argument("--rtt", type=float, default=None, help="Round-trip time in ms")
    common.add_argument("--loss", type=float, default=None, help="Random loss probability per packet")
    common.add_argument("--queue", type=int, default=None, help="Bottleneck queue in packets (default: one BDP)")
    common.add_argument("--sandbox", type=str, default=None, help="Plugin file sandbox root")
    common.add_argument("--verbose", action="store_true", help="Enable debug logging")

    parser = argparse.ArgumentParser(
        description="Core QUIC plugin toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="See README.md for experiment descriptions and output formats.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    build = sub.add_parser("build", parents=[common], help="Write protocol plugin binaries")
    build.add_argument("names", nargs="*", help=f"Plugins to build (default: all of {sorted(PLUGINS)})")

    inspect = sub.add_parser("inspect", parents=[common], help="Report on a plugin binary")
    inspect.add_argument("plugin_path", help="Path to a .wasm plugin")

    run = sub.add_parser("run", parents=[common], help="Run one transfer")
    run.add_argument("--mode", choices=["netsim", "udp"], default=None)
    run.add_argument("--role", choices=["client", "server"], default=None)
    run.add_argument("--backend", type=str, default=None, help="Local backend: alpha or beta")
    run.add_argument("--peer-backend", type=str, default=None, help="Peer backend (netsim)")
    run.add_argument("--bind", type=str, default=None, help="Local host:port (udp)")
    run.add_argument("--peer", type=str, default=None, help="Remote host:port (udp client)")
    run.add_argument("--size", type=int, default=None, help="Octets the server sends")
    run.add_argument("--plugin", action="append", default=[], help="Plugin for the local endpoint")
    run.add_argument("--peer-plugin", action="append", default=[], help="Plugin for the peer (netsim)")
    run.add_argument("--permissions", type=str, default=None,
                     help=f"Profile ({', '.join(config.permission_profiles)}) or grant list")
    run.add_argument("--host-profile", type=str, default=None,
                     help=f"Fields exposed to plugins ({', '.join(config.host_profiles)})")
    run.add_argument("--control", action="append", default=[],
                     help="PluginControl call plugin:op[:arg,...][@ms]")
    run.add_argument("--timeout", type=float, default=None, help="Wall-clock limit in seconds (udp)")

    experiment = sub.add_parser("experiment", parents=[common], help="Run an experiment suite")
    experiment.add_argument("name", choices=list(SUITES) + ["bench"])
    experiment.add_argument("--runs", type=int, default=None)
    experiment.add_argument("--size", type=int, default=None, help="Transfer size in octets")
    experiment.add_argument("--backends", type=str, default=None, help="Comma list of backends")
    experiment.add_argument("--no-charts", dest="charts", action="store_const", const=False, default=None)
    experiment.add_argument("--iterations", type=int, default=None, help=argparse.SUPPRESS)
    experiment.add_argument("--warmup", type=float, default=None, help=argparse.SUPPRESS)

    bench = sub.add_parser("bench", parents=[common], help="Run the micro-benchmark ladder")
    bench.add_argument("--iterations", type=int, default=None)
    bench.add_argument("--warmup", type=float, default=None, help="Warm-up seconds per benchmark")
    bench.add_argument("--only", type=str, default=None, help=f"Comma list from {''.join(LADDER)}")
    return parser


_NOT_SETTINGS = {"command", "config", "verbose", "names", "plugin_path", "name"}


def settings_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS}
    for key in ("backends", "only"):
        if isinstance(overrides.get(key), str):
            overrides[key] = [item.strip() for item in overrides[key].split(",") if item.strip()]
    return build_run_config(overrides, args.config)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        cfg = settings_from_args(args)
        logger.debug(f"Settings: {cfg}")
        if args.command == "build":
            return cmd_build(cfg, args.names)
        if args.command == "inspect":
            return cmd_inspect(args.plugin_path)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "experiment":
            return cmd_experiment(cfg, args.name)
        return cmd_bench(cfg)

    except KeyboardInterrupt:
        print("\n\n❌ Interrupted by user (Ctrl+C)")
        return EXIT_ERROR

    except PluginInvalid as e:
        print(f"\n❌ Plugin invalid: {e}")
        return EXIT_PLUGIN_INVALID

    except LoadRejected as e:
        print(f"\n❌ Plugin load rejected ({e.reason.value}): {e.detail}")
        print("   Nothing was sent")
        return EXIT_LOAD_REJECTED

    except ScenarioTimeout as e:
        print(f"\n❌ Scenario timeout: {e}")
        return EXIT_TIMEOUT

    except FileNotFoundError as e:
        print(f"\n❌ File not found: {e}")
        return EXIT_ERROR

    except ValueError as e:
        print(f"\n❌ Invalid input parameter: {e}")
        print("   Check command line arguments and try again")
        return EXIT_ERROR

    except Exception as e:
        print(f"\n❌ Unexpected error occurred: {e}")
        if args.verbose:
            print("\nFull traceback:")
            traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
