"""
Virtual-clock scenario runner: one client and one server connection joined by
a simulated link, driving a single server-to-client transfer.

Time is simulated in integer microseconds. Plugin timers read the connection
clock, so a 500 ms RTT transfer runs as fast as the host can compute it.
"""

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.common.errors import CoreQuicError, LoadRejected, ScenarioTimeout
from src.common.values import PluginVal
from src.config import config
from src.engine.permissions import PermissionSet
from src.netsim.link import CLIENT_TO_SERVER, SERVER_TO_CLIENT, LinkDirection, LinkModel
from src.plugins import build_plugin
from src.quic import Connection, Packet, PacketKind, create_connection
from src.sdk.binary import read_manifest

logger = logging.getLogger(__name__)

HISTOGRAM_BUCKET = 50
# iterations at one virtual instant before the run is declared stuck
MAX_STEPS_PER_INSTANT = 10000

TRACE_COLUMNS = ["direction", "ts_us", "len", "types", "kind"]


@dataclass
class PluginSpec:
    """
    A plugin to load on one endpoint.

    Args:
        name: Catalogue name, used to build the binary when none is given
        binary: Prebuilt plugin binary
        permissions: Grants; defaults to the permissions in the binary's manifest
    """
    name: str
    binary: Optional[bytes] = None
    permissions: Optional[PermissionSet] = None

    def resolve(self) -> Tuple[bytes, PermissionSet]:
        binary = self.binary if self.binary is not None else build_plugin(self.name)
        permissions = self.permissions
        if permissions is None:
            manifest = read_manifest(binary) or {}
            permissions = PermissionSet.from_names(manifest.get("permissions", []))
        return binary, permissions


@dataclass
class ControlAction:
    """PluginControl call issued by the harness at a virtual time."""
    at_us: int
    side: str
    plugin: str
    op: int
    args: Tuple[PluginVal, ...] = ()


@dataclass
class ScenarioConfig:
    client_backend: str = "alpha"
    server_backend: str = "alpha"
    client_plugins: List[PluginSpec] = field(default_factory=list)
    server_plugins: List[PluginSpec] = field(default_factory=list)
    link: LinkModel = field(default_factory=LinkModel.from_config)
    transfer_octets: int = 500_000
    seed: int = 1
    mtu: Optional[int] = None
    virtual_timeout_us: int = field(
        default_factory=lambda: int(config.experiments['virtual_timeout_s'] * 1_000_000))
    controls: List[ControlAction] = field(default_factory=list)
    client_host_profile: Optional[str] = None
    server_host_profile: Optional[str] = None
    # client/ and server/ below it hold the per-plugin sandboxes
    sandbox_root: Optional[Path] = None
    # raise LoadRejected instead of continuing without the plugin
    strict_loading: bool = False


@dataclass(frozen=True)
class TraceRecord:
    direction: str
    ts_us: int
    len: int
    types: Tuple[int, ...]
    kind: str

    def to_row(self) -> Dict:
        return {
            "direction": self.direction,
            "ts_us": self.ts_us,
            "len": self.len,
            "types": ";".join(f"0x{t:02x}" for t in self.types),
            "kind": self.kind,
        }


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    trace: List[TraceRecord]
    transfer_time_us: int
    handshake_us: Optional[int]
    client_stats: Dict
    server_stats: Dict
    link_stats: Dict[str, Dict]
    rejected: Dict[str, str] = field(default_factory=dict)
    control_log: List[Dict] = field(default_factory=list)

    def records(self, direction: Optional[str] = None, kind: Optional[str] = None) -> List[TraceRecord]:
        return [r for r in self.trace
                if (direction is None or r.direction == direction) and (kind is None or r.kind == kind)]

    def inter_departures(self, direction: str = SERVER_TO_CLIENT) -> np.ndarray:
        """Gaps between consecutive OneRtt departures in one direction, microseconds."""
        times = np.array([r.ts_us for r in self.records(direction, PacketKind.ONE_RTT.name)], dtype=np.int64)
        return np.diff(times)

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.trace], columns=TRACE_COLUMNS)

    def summary(self) -> Dict:
        lengths = np.array([r.len for r in self.trace], dtype=np.int64)
        mtu = self.config.mtu or config.transport['mtu']
        edges = np.arange(0, mtu + HISTOGRAM_BUCKET + 1, HISTOGRAM_BUCKET)
        counts, _ = np.histogram(lengths, bins=edges)
        gaps = self.inter_departures()
        return {
            "transfer_time_us": self.transfer_time_us,
            "handshake_us": self.handshake_us,
            "pkt_count": len(self.trace),
            "retx_count": self.client_stats["retransmissions"] + self.server_stats["retransmissions"],
            "histogram": {f"{int(lo)}-{int(hi)}": int(c)
                          for lo, hi, c in zip(edges[:-1], edges[1:], counts) if c},
            "inter_departure_us": {
                "median": float(np.median(gaps)) if len(gaps) else None,
                "mean": float(np.mean(gaps)) if len(gaps) else None,
                "p90": float(np.percentile(gaps, 90)) if len(gaps) else None,
            },
            "client_backend": self.config.client_backend,
            "server_backend": self.config.server_backend,
            "seed": self.config.seed,
            "transfer_octets": self.config.transfer_octets,
            "rejected": dict(self.rejected),
            "link": self.link_stats,
        }


StepCallback = Callable[[int, Connection, Connection], None]


class ScenarioRunner:
    """Builds both endpoints and the link, then runs the event loop once."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        mtu = cfg.mtu or config.transport['mtu']
        sandbox_root = Path(cfg.sandbox_root or config.sandbox_dir / "netsim")
        self.client = create_connection(cfg.client_backend, "client", host_profile=cfg.client_host_profile,
                                        mtu=mtu, seed=cfg.seed * 2, sandbox_root=sandbox_root / "client")
        self.server = create_connection(cfg.server_backend, "server", host_profile=cfg.server_host_profile,
                                        mtu=mtu, seed=cfg.seed * 2 + 1, sandbox_root=sandbox_root / "server")
        self.links = {
            CLIENT_TO_SERVER: LinkDirection(cfg.link, CLIENT_TO_SERVER),
            SERVER_TO_CLIENT: LinkDirection(cfg.link, SERVER_TO_CLIENT),
        }
        self.trace: List[TraceRecord] = []
        self.rejected: Dict[str, str] = {}
        self.control_log: List[Dict] = []
        self._in_transit: List[Tuple[int, int, str, bytes]] = []
        self._seq = itertools.count()
        self._controls = sorted(cfg.controls, key=lambda c: c.at_us)
        self._handshake_us: Optional[int] = None

        self._load(self.client, "client", cfg.client_plugins)
        self._load(self.server, "server", cfg.server_plugins)

    def _load(self, conn: Connection, side: str, specs: Sequence[PluginSpec]) -> None:
        for spec in specs:
            binary, permissions = spec.resolve()
            try:
                conn.load_plugin(binary, permissions)
            except LoadRejected as e:
                if self.cfg.strict_loading:
                    raise
                logger.warning(f"{side} continues without {spec.name}: {e}")
                self.rejected[f"{side}:{spec.name}"] = e.reason.value

    def _endpoint(self, side: str) -> Connection:
        return self.client if side == "client" else self.server

    # ------------------------------------------------------------------
    # Event loop
    # ------------------------------------------------------------------

    def _next_event_time(self) -> Optional[int]:
        candidates = [self.client.next_timeout(), self.server.next_timeout()]
        if self._in_transit:
            candidates.append(self._in_transit[0][0])
        if self._controls:
            candidates.append(self._controls[0].at_us)
        due = [t for t in candidates if t is not None]
        return min(due) if due else None

    def _transmit(self, now: int) -> None:
        for conn, direction, target in ((self.client, CLIENT_TO_SERVER, "server"),
                                        (self.server, SERVER_TO_CLIENT, "client")):
            for packet in conn.send_packets(now):
                self._record(direction, packet, now)
                arrival = self.links[direction].enqueue(len(packet), now)
                if arrival is not None:
                    heapq.heappush(self._in_transit, (arrival, next(self._seq), target, packet.data))

    def _record(self, direction: str, packet: Packet, now: int) -> None:
        self.trace.append(TraceRecord(direction, now, len(packet), packet.frame_types, packet.kind.name))

    def _deliver(self, now: int) -> None:
        while self._in_transit and self._in_transit[0][0] <= now:
            _, _, target, data = heapq.heappop(self._in_transit)
            self._endpoint(target).receive_packet(data, now)

    def _run_controls(self, now: int) -> None:
        while self._controls and self._controls[0].at_us <= now:
            action = self._controls.pop(0)
            entry = {"ts_us": now, "side": action.side, "plugin": action.plugin, "op": action.op}
            try:
                result = self._endpoint(action.side).plugin_control(action.plugin, action.op, action.args)
                entry.update(status=result.status, outputs=[str(v) for v in result.outputs])
            except CoreQuicError as e:
                entry.update(status=None, error=f"{type(e).__name__}: {e}")
            logger.info(f"Control {action.side}:{action.plugin} op={action.op} -> {entry}")
            self.control_log.append(entry)

    def _timeout(self, reason: str, now: int) -> ScenarioTimeout:
        trace = pd.DataFrame([r.to_row() for r in self.trace[-50:]], columns=TRACE_COLUMNS)
        return ScenarioTimeout(
            f"{reason} at t={now}us (client {self.client.recv_stream.highest}/"
            f"{self.cfg.transfer_octets} octets, {len(self.trace)} packets)", trace=trace)

    def run(self, on_step: Optional[StepCallback] = None) -> ScenarioResult:
        cfg = self.cfg
        client, server = self.client, self.server
        server.send_stream_data(length=cfg.transfer_octets)
        now = 0
        client.connect(now)
        self._transmit(now)
        steps_at_instant = 0

        try:
            while not client.transfer_complete:
                next_time = self._next_event_time()
                if next_time is None:
                    raise self._timeout("Transfer stalled with nothing scheduled", now)
                if next_time > cfg.virtual_timeout_us:
                    raise self._timeout("Virtual timeout reached", now)
                if next_time <= now:
                    steps_at_instant += 1
                    if steps_at_instant > MAX_STEPS_PER_INSTANT:
                        raise self._timeout("No progress", now)
                else:
                    steps_at_instant = 0
                    now = next_time

                self._deliver(now)
                for conn in (client, server):
                    deadline = conn.next_timeout()
                    if deadline is not None and deadline <= now:
                        conn.handle_timeout(now)
                self._run_controls(now)
                self._transmit(now)
                if self._handshake_us is None and client.established:
                    self._handshake_us = now
                if on_step is not None:
                    on_step(now, client, server)
        finally:
            client.shutdown()
            server.shutdown()

        logger.info(f"Scenario {cfg.server_backend}->{cfg.client_backend} seed={cfg.seed}: "
                    f"{cfg.transfer_octets} octets in {now / 1000:.1f} ms, {len(self.trace)} packets")
        return ScenarioResult(
            config=cfg,
            trace=self.trace,
            transfer_time_us=now,
            handshake_us=self._handshake_us,
            client_stats=dict(client.stats),
            server_stats=dict(server.stats),
            link_stats={name: link.stats() for name, link in self.links.items()},
            rejected=dict(self.rejected),
            control_log=list(self.control_log),
        )


def run_scenario(cfg: ScenarioConfig, on_step: Optional[StepCallback] = None) -> ScenarioResult:
    """
    Run one seeded transfer.

    Args:
        cfg: Endpoints, plugins, link and transfer size
        on_step: Called after every event-loop step with (now, client, server)

    Returns:
        ScenarioResult with the packet trace and summary statistics

    Raises:
        ScenarioTimeout: Transfer did not finish before the virtual timeout
        LoadRejected: A plugin was refused and `strict_loading` is set
    """
    return ScenarioRunner(cfg).run(on_step)
