"""
Experiment suites run on the simulated link.

    privacy   baseline vs privacy_padding transfers; packet sizes and
              inter-departure distribution (two-sample KS test)
    bdp       cold vs resumed transfers with bdp_frame, for every
              client/server backend pairing
    combined  privacy_padding and dummy_frame cooperating: padding state
              toggles and the DUMMY in-flight bound

Every suite writes one trace CSV per run, a runs CSV, a summary JSON and a
chart into its output directory. A run that times out is recorded and the
suite continues.
"""

import itertools
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

from src.common.errors import CoreQuicError, ScenarioTimeout
from src.config import config
from src.netsim.link import CLIENT_TO_SERVER, SERVER_TO_CLIENT, LinkModel
from src.netsim.scenario import PluginSpec, ScenarioConfig, ScenarioResult, run_scenario
from src.plugins import bdp_frame, dummy_frame, privacy_padding
from src.quic import BACKENDS, PacketKind
from src.utils.output_utils import save_runs_csv, save_summary_json, save_trace_csv

logger = logging.getLogger(__name__)

SUITES = ("privacy", "bdp", "combined")

# Two-sample KS critical coefficient at alpha = 0.01
KS_COEFFICIENT_1PCT = 1.628


@dataclass
class SuiteOptions:
    """
    Overrides for a suite; None falls back to config `experiments.<suite>`.
    """
    runs: Optional[int] = None
    seed: int = 1
    transfer_octets: Optional[int] = None
    rate_bps: Optional[float] = None
    rtt_ms: Optional[float] = None
    queue_packets: Optional[int] = None
    loss_prob: Optional[float] = None
    mtu: Optional[int] = None
    backends: List[str] = field(default_factory=lambda: sorted(BACKENDS))
    charts: bool = True


def _settings(suite: str, options: SuiteOptions) -> Dict:
    settings = dict(config.experiments[suite])
    for key in ("runs", "transfer_octets", "rate_bps", "rtt_ms"):
        value = getattr(options, key)
        if value is not None:
            settings[key] = value
    return settings


def _link(settings: Dict, options: SuiteOptions, seed: int) -> LinkModel:
    return LinkModel.from_config(rate_bps=settings['rate_bps'], rtt_ms=settings['rtt_ms'],
                                 queue_packets=options.queue_packets, loss_prob=options.loss_prob,
                                 seed=seed, mtu=options.mtu)


def ks_test(baseline: np.ndarray, shaped: np.ndarray) -> Dict:
    """Two-sample KS test with the 1% critical value for the sample sizes."""
    n, m = len(baseline), len(shaped)
    if n == 0 or m == 0:
        return {"statistic": None, "pvalue": None, "critical_1pct": None, "exceeds_1pct": False}
    result = stats.ks_2samp(baseline, shaped)
    critical = KS_COEFFICIENT_1PCT * np.sqrt((n + m) / (n * m))
    return {
        "statistic": float(result.statistic),
        "pvalue": float(result.pvalue),
        "critical_1pct": float(critical),
        "exceeds_1pct": bool(result.statistic > critical),
        "baseline_samples": n,
        "shaped_samples": m,
    }


def _attempt(cfg: ScenarioConfig, label: str, out_dir: Optional[Path],
             on_step=None) -> Optional[ScenarioResult]:
    try:
        result = run_scenario(cfg, on_step)
    except ScenarioTimeout as e:
        logger.error(f"{label}: {e}")
        if out_dir is not None and e.trace is not None:
            e.trace.to_csv(out_dir / f"{label}_timeout.csv", index=False)
        return None
    if out_dir is not None:
        save_trace_csv(result, str(out_dir / f"{label}.csv"))
    return result


# ----------------------------------------------------------------------
# privacy
# ----------------------------------------------------------------------

def padded_fraction(result: ScenarioResult, mtu: int) -> float:
    """Share of OneRtt packets, both directions, whose wire length is the MTU."""
    lengths = [r.len for r in result.records(kind=PacketKind.ONE_RTT.name)]
    return float(np.mean([n == mtu for n in lengths])) if lengths else 0.0


def run_privacy(out_dir: Optional[Path], options: SuiteOptions) -> Dict:
    settings = _settings("privacy", options)
    mtu = options.mtu or config.transport['mtu']
    initial_size = config.transport['initial_packet_size']
    rows, baseline_gaps, shaped_gaps = [], [], []
    examples: Dict[str, ScenarioResult] = {}

    for run in range(settings['runs']):
        seed = options.seed + run
        for variant, plugins in (("baseline", []), ("padded", [privacy_padding.NAME])):
            cfg = ScenarioConfig(
                client_plugins=[PluginSpec(name) for name in plugins],
                server_plugins=[PluginSpec(name) for name in plugins],
                link=_link(settings, options, seed),
                transfer_octets=settings['transfer_octets'],
                seed=seed, mtu=mtu,
                sandbox_root=(out_dir / "sandbox" / f"run_{run:02d}_{variant}") if out_dir else None,
            )
            label = f"run_{run:02d}_{variant}"
            result = _attempt(cfg, label, out_dir)
            if result is None:
                rows.append({"run": run, "variant": variant, "seed": seed, "status": "timeout"})
                continue
            examples.setdefault(variant, result)
            gaps = result.inter_departures(SERVER_TO_CLIENT)
            (baseline_gaps if variant == "baseline" else shaped_gaps).append(gaps)
            initials = [r.len for r in result.records(kind=PacketKind.INITIAL.name)]
            rows.append({
                "run": run, "variant": variant, "seed": seed, "status": "ok",
                "transfer_time_us": result.transfer_time_us,
                "pkt_count": len(result.trace),
                "retx_count": result.summary()["retx_count"],
                "padded_fraction": padded_fraction(result, mtu),
                "initials_at_min_size": all(n == initial_size for n in initials),
            })

    ks = ks_test(np.concatenate(baseline_gaps) if baseline_gaps else np.array([]),
                 np.concatenate(shaped_gaps) if shaped_gaps else np.array([]))
    padded_rows = [r for r in rows if r["variant"] == "padded" and r["status"] == "ok"]
    summary = {
        "suite": "privacy",
        "runs": settings['runs'],
        "timeouts": sum(r["status"] == "timeout" for r in rows),
        "ks": ks,
        "padded_fraction_min": min((r["padded_fraction"] for r in padded_rows), default=None),
        "initials_at_min_size": all(r["initials_at_min_size"] for r in padded_rows),
        "median_transfer_us": {
            variant: float(np.median([r["transfer_time_us"] for r in rows
                                      if r["variant"] == variant and r["status"] == "ok"] or [np.nan]))
            for variant in ("baseline", "padded")
        },
    }
    _write(out_dir, "privacy", rows, summary)
    if out_dir is not None and options.charts and examples:
        _privacy_chart(examples, out_dir / "privacy_sizes.png")
    return summary


def _privacy_chart(examples: Dict[str, ScenarioResult], output_path: Path) -> None:
    fig, axes = plt.subplots(1, len(examples), figsize=(12, 5), sharey=True, squeeze=False)
    for ax, (variant, result) in zip(axes[0], examples.items()):
        records = result.records(SERVER_TO_CLIENT)
        ax.scatter([r.ts_us / 1000 for r in records], [r.len for r in records], s=4, alpha=0.6)
        ax.set_title(f"{variant} (server to client)", fontsize=12)
        ax.set_xlabel("Time (ms)", fontsize=11)
        ax.grid(True, alpha=0.3)
    axes[0][0].set_ylabel("Packet size (octets)", fontsize=11)
    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    print(f"Privacy chart saved to: {output_path}")


# ----------------------------------------------------------------------
# bdp
# ----------------------------------------------------------------------

def read_bdp_record(client_sandbox: Path) -> Optional[Dict]:
    """Latest record kept by the client side of bdp_frame, or None."""
    records = sorted((client_sandbox / bdp_frame.NAME).glob("bdp-*.txt"))
    if not records:
        return None
    lines = records[-1].read_text().splitlines()
    if len(lines) < 3:
        return None
    return {"identity": lines[0], "cwnd": int(lines[1]), "rtt_us": int(lines[2])}


class CwndWatch:
    """Watches the server cwnd for `expected` during the RTT after the handshake."""

    def __init__(self, expected: Optional[int], rtt_us: int):
        self.expected = expected
        self.rtt_us = rtt_us
        self.handshake_us: Optional[int] = None
        self.matched = False

    def __call__(self, now: int, client, server) -> None:
        if self.handshake_us is None:
            if server.established:
                self.handshake_us = now
            else:
                return
        if now <= self.handshake_us + self.rtt_us and server.cwnd == self.expected:
            self.matched = True


def run_bdp(out_dir: Optional[Path], options: SuiteOptions) -> Dict:
    settings = _settings("bdp", options)
    ceiling = config.plugins['bdp_frame']['ceiling_octets']
    sandbox_base = Path(out_dir or config.sandbox_dir) / "bdp_sandbox"
    rows = []

    for client_backend, server_backend in itertools.product(options.backends, repeat=2):
        pairing = f"{client_backend}-{server_backend}"
        for run in range(settings['runs']):
            seed = options.seed + run
            sandbox = sandbox_base / pairing / f"run_{run:02d}"
            shutil.rmtree(sandbox, ignore_errors=True)
            row = {"pairing": pairing, "run": run, "seed": seed}

            def config_for() -> ScenarioConfig:
                return ScenarioConfig(
                    client_backend=client_backend, server_backend=server_backend,
                    client_plugins=[PluginSpec(bdp_frame.NAME)],
                    server_plugins=[PluginSpec(bdp_frame.NAME)],
                    link=_link(settings, options, seed),
                    transfer_octets=settings['transfer_octets'],
                    seed=seed, mtu=options.mtu, sandbox_root=sandbox,
                )

            cold = _attempt(config_for(), f"{pairing}_run_{run:02d}_cold", out_dir)
            record = read_bdp_record(sandbox / "client")
            expected = min(record["cwnd"], ceiling) if record else None
            watch = CwndWatch(expected, int(settings['rtt_ms'] * 1000))
            resumed = _attempt(config_for(), f"{pairing}_run_{run:02d}_resumed", out_dir, on_step=watch)
            row.update({
                "cold_us": cold.transfer_time_us if cold else None,
                "resumed_us": resumed.transfer_time_us if resumed else None,
                "saved_cwnd": record["cwnd"] if record else None,
                "expected_cwnd": expected,
                "cwnd_resumed_within_rtt": watch.matched,
            })
            rows.append(row)

    pairings = {}
    for pairing in dict.fromkeys(r["pairing"] for r in rows):
        cold = [r["cold_us"] for r in rows if r["pairing"] == pairing and r["cold_us"] is not None]
        resumed = [r["resumed_us"] for r in rows if r["pairing"] == pairing and r["resumed_us"] is not None]
        median_cold = float(np.median(cold)) if cold else None
        median_resumed = float(np.median(resumed)) if resumed else None
        pairings[pairing] = {
            "median_cold_us": median_cold,
            "median_resumed_us": median_resumed,
            "resumed_faster": bool(median_cold and median_resumed and median_resumed < median_cold),
            "cwnd_resumed_runs": sum(bool(r["cwnd_resumed_within_rtt"]) for r in rows
                                     if r["pairing"] == pairing),
        }
    summary = {"suite": "bdp", "runs": settings['runs'], "ceiling": ceiling, "pairings": pairings}
    _write(out_dir, "bdp", rows, summary)
    if out_dir is not None and options.charts and pairings:
        _bdp_chart(pairings, out_dir / "bdp_transfer_times.png")
    return summary


def _bdp_chart(pairings: Dict[str, Dict], output_path: Path) -> None:
    names = list(pairings)
    x = np.arange(len(names))
    cold = [(pairings[n]["median_cold_us"] or 0) / 1e6 for n in names]
    resumed = [(pairings[n]["median_resumed_us"] or 0) / 1e6 for n in names]
    fig = plt.figure(figsize=(10, 6))
    plt.bar(x - 0.2, cold, width=0.4, label='Cold start', color='gray')
    plt.bar(x + 0.2, resumed, width=0.4, label='Resumed', color='blue')
    plt.xticks(x, [f"client {n.split('-')[0]}\nserver {n.split('-')[1]}" for n in names])
    plt.ylabel('Median transfer time (s)', fontsize=12)
    plt.title('BDP resumption', fontsize=14, fontweight='bold')
    plt.legend(fontsize=11)
    plt.grid(True, axis='y', alpha=0.3)
    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    print(f"BDP chart saved to: {output_path}")


# ----------------------------------------------------------------------
# combined
# ----------------------------------------------------------------------

class CooperationWatch:
    """
    Samples the client padding state and the number of DUMMY frames each side
    has in flight after every event-loop step. The client padding toggles when
    the client has received another batch of server DUMMY frames.
    """

    def __init__(self, dummy_type: int):
        self.dummy_type = dummy_type
        self.toggles: List[int] = []
        self.state_changes: List[tuple] = []
        self.max_dummy_in_flight = 0
        self._state: Optional[bool] = None

    def _dummies(self, conn) -> int:
        return sum(1 for t in conn.frames_in_flight() if t == self.dummy_type)

    def __call__(self, now: int, client, server) -> None:
        self.max_dummy_in_flight = max(self.max_dummy_in_flight, self._dummies(client), self._dummies(server))
        try:
            result = client.plugin_control(privacy_padding.NAME, privacy_padding.OP_STATE)
        except CoreQuicError as e:
            logger.debug(f"Padding state unavailable: {e}")
            return
        if not result.ok or not result.outputs:
            return
        state = bool(result.outputs[0].value)
        if self._state is not None and state != self._state:
            self.toggles.append(now)
        if state != self._state:
            self.state_changes.append((now, state))
        self._state = state


def run_combined(out_dir: Optional[Path], options: SuiteOptions) -> Dict:
    settings = _settings("combined", options)
    window_us = int(settings['window_s'] * 1_000_000)
    band_low, band_high = (int(ms * 1000) for ms in settings['first_toggle_band_ms'])
    dummy_type = config.plugins['dummy_frame']['frame_type']
    plugins = [PluginSpec(privacy_padding.NAME), PluginSpec(dummy_frame.NAME)]
    rows = []
    watches = []

    for run in range(settings['runs']):
        seed = options.seed + run
        cfg = ScenarioConfig(
            client_plugins=list(plugins), server_plugins=list(plugins),
            link=_link(settings, options, seed),
            transfer_octets=settings['transfer_octets'],
            seed=seed, mtu=options.mtu,
            sandbox_root=(out_dir / "sandbox" / f"run_{run:02d}") if out_dir else None,
        )
        watch = CooperationWatch(dummy_type)
        result = _attempt(cfg, f"run_{run:02d}", out_dir, on_step=watch)
        in_window = [t for t in watch.toggles if t <= window_us]
        first = watch.toggles[0] if watch.toggles else None
        rows.append({
            "run": run, "seed": seed, "status": "ok" if result else "timeout",
            "transfer_time_us": result.transfer_time_us if result else None,
            "toggles_in_window": len(in_window),
            "first_toggle_us": first,
            "first_toggle_in_band": first is not None and band_low <= first <= band_high,
            "max_dummy_in_flight": watch.max_dummy_in_flight,
        })
        watches.append((watch, result))

    summary = {
        "suite": "combined",
        "runs": settings['runs'],
        "rtt_ms": settings['rtt_ms'],
        "window_s": settings['window_s'],
        "min_toggles_in_window": min((r["toggles_in_window"] for r in rows), default=0),
        "first_toggle_us": [r["first_toggle_us"] for r in rows],
        "first_toggle_band_ms": list(settings['first_toggle_band_ms']),
        "first_toggle_in_band": bool(rows) and all(r["first_toggle_in_band"] for r in rows),
        "dummy_bound_holds": all(r["max_dummy_in_flight"] <= 1 for r in rows),
    }
    _write(out_dir, "combined", rows, summary)
    if out_dir is not None and options.charts and watches and watches[0][1] is not None:
        _combined_chart(*watches[0], window_us, out_dir / "combined_timeline.png")
    return summary


def _combined_chart(watch: CooperationWatch, result: ScenarioResult, window_us: int,
                    output_path: Path) -> None:
    records = [r for r in result.records(CLIENT_TO_SERVER) if r.ts_us <= window_us]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(12, 7), sharex=True)
    top.scatter([r.ts_us / 1000 for r in records], [r.len for r in records], s=4, alpha=0.6)
    top.set_ylabel('Packet size (octets)', fontsize=11)
    top.grid(True, alpha=0.3)
    changes = [(t, s) for t, s in watch.state_changes if t <= window_us]
    if changes:
        times = [t / 1000 for t, _ in changes] + [window_us / 1000]
        states = [int(s) for _, s in changes] + [int(changes[-1][1])]
        bottom.step(times, states, where='post', color='blue', linewidth=2)
    bottom.set_ylabel('Padding on', fontsize=11)
    bottom.set_xlabel('Time (ms)', fontsize=11)
    bottom.grid(True, alpha=0.3)
    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    print(f"Combined chart saved to: {output_path}")


# ----------------------------------------------------------------------

def _write(out_dir: Optional[Path], suite: str, rows: List[Dict], summary: Dict) -> None:
    if out_dir is None:
        return
    if rows:
        save_runs_csv(rows, str(out_dir / f"{suite}_runs.csv"))
    save_summary_json(summary, str(out_dir / f"{suite}_summary.json"))


RUNNERS: Dict[str, Callable[[Optional[Path], SuiteOptions], Dict]] = {
    "privacy": run_privacy,
    "bdp": run_bdp,
    "combined": run_combined,
}


def run_suite(name: str, out_dir: Optional[Path] = None, options: Optional[SuiteOptions] = None) -> Dict:
    """
    Run a built-in suite.

    Args:
        name: One of SUITES
        out_dir: Directory for traces, runs CSV, summary JSON and chart; None keeps results in memory
        options: Run count, seed and link overrides

    Returns:
        Dict: Suite summary (also written as <name>_summary.json)
    """
    if name not in RUNNERS:
        raise ValueError(f"Unknown suite '{name}'. Available: {list(SUITES)}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running suite {name}")
    return RUNNERS[name](out_dir, options or SuiteOptions())
