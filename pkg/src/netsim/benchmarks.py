"""
Micro-benchmark ladder for the plugin machinery.

    A  raw runtime call of an empty export
    B  empty PluginControl hook through the engine
    C  raw two-call arithmetic (store two operands, compute the four operations)
    D  the same arithmetic through the engine, operands and results as PluginVal
    E  mock-host MAX_DATA send and receive, native
    F  the same cycle with all seven MAX_DATA routines defined by a plugin
    G  loading the MAX_DATA plugin

Each benchmark reports the median over `iterations` samples taken after a
warm-up. Sub-microsecond benchmarks time `inner_calls` calls per sample.
Loading and compiling happen outside the measured region, except in G.
"""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
import wasmtime

from src.common.values import PluginVal
from src.config import config
from src.engine.permissions import PermissionSet
from src.netsim.mock_host import MockHost
from src.plugins import build_plugin
from src.plugins.testing import build_raw_arith

logger = logging.getLogger(__name__)

LADDER = ("A", "B", "C", "D", "E", "F", "G")

DESCRIPTIONS = {
    "A": "raw runtime call, empty export",
    "B": "empty hook through the engine",
    "C": "raw store_operands + compute",
    "D": "arithmetic hook with PluginVal staging",
    "E": "mock MAX_DATA send+receive, native",
    "F": "mock MAX_DATA send+receive, seven plugin routines",
    "G": "MAX_DATA plugin load",
}


@dataclass
class BenchmarkResult:
    name: str
    description: str
    median_ns: float
    p10_ns: float
    p90_ns: float
    samples: int

    def to_dict(self) -> Dict:
        return asdict(self)


def format_ns(value: float) -> str:
    if value >= 1e6:
        return f"{value / 1e6:.2f} ms"
    if value >= 1e3:
        return f"{value / 1e3:.2f} us"
    return f"{value:.1f} ns"


def _measure(call: Callable[[], object], iterations: int, inner: int,
             warmup_s: float, setup: Optional[Callable[[], Callable[[], object]]] = None) -> np.ndarray:
    """
    Per-call durations in nanoseconds, one per sample.

    When `setup` is given it runs before every sample, outside the timed
    region, and returns the callable to time.
    """
    deadline = time.perf_counter() + warmup_s
    while time.perf_counter() < deadline:
        (setup() if setup else call)()

    samples = np.empty(iterations, dtype=np.float64)
    for i in range(iterations):
        target = setup() if setup else call
        start = time.perf_counter_ns()
        for _ in range(inner):
            target()
        samples[i] = (time.perf_counter_ns() - start) / inner
    return samples


class RawArith:
    """The raw benchmark module on a bare runtime: no engine, no fuel, no imports."""

    def __init__(self):
        engine = wasmtime.Engine()
        self.store = wasmtime.Store(engine)
        module = wasmtime.Module(engine, build_raw_arith())
        exports = wasmtime.Instance(self.store, module, []).exports(self.store)
        self._empty = exports["empty"]
        self._store_operands = exports["store_operands"]
        self._compute = exports["compute"]
        self.memory = exports["memory"]

    def empty(self) -> None:
        self._empty(self.store)

    def arith(self, a: int = 84, b: int = 2) -> None:
        self._store_operands(self.store, a, b)
        self._compute(self.store)

    def results(self) -> List[int]:
        data = self.memory.read(self.store, 0, 32)
        return [int.from_bytes(data[i:i + 8], "little", signed=True) for i in range(0, 32, 8)]


def _mock_with(*names: str, seed: int = 0, sandbox_root=None) -> MockHost:
    host = MockHost(seed=seed, sandbox_root=sandbox_root)
    for name in names:
        host.load_plugin(build_plugin(name), PermissionSet.all())
    return host


def run_benchmarks(iterations: Optional[int] = None, warmup_s: Optional[float] = None,
                   inner_calls: Optional[int] = None, only: Optional[List[str]] = None,
                   sandbox_root=None) -> Dict[str, BenchmarkResult]:
    """
    Run the ladder.

    Args:
        iterations: Samples per benchmark (config `benchmarks.iterations`)
        warmup_s: Warm-up per benchmark in seconds (config `benchmarks.warmup_s`)
        inner_calls: Calls per sample for A-F (config `benchmarks.inner_calls`)
        only: Subset of LADDER to run
        sandbox_root: Sandbox parent for the mock hosts

    Returns:
        Dict: letter -> BenchmarkResult, in ladder order
    """
    settings = config.benchmarks
    iterations = iterations or settings['iterations']
    warmup_s = settings['warmup_s'] if warmup_s is None else warmup_s
    inner = inner_calls or settings['inner_calls']
    selected = [name for name in LADDER if only is None or name in only]

    raw = RawArith()
    empty_host = _mock_with("empty", sandbox_root=sandbox_root)
    arith_host = _mock_with("arith", sandbox_root=sandbox_root)
    native_tx, native_rx = MockHost(sandbox_root=sandbox_root), MockHost(is_server=True, sandbox_root=sandbox_root)
    plugin_tx = _mock_with("max_data", sandbox_root=sandbox_root)
    plugin_rx = _mock_with("max_data", seed=1, sandbox_root=sandbox_root)
    max_data_binary = build_plugin("max_data")
    operands = [PluginVal.u64(84), PluginVal.u64(2)]

    def load_target() -> Callable[[], object]:
        host = MockHost(sandbox_root=sandbox_root)
        return lambda: host.load_plugin(max_data_binary, PermissionSet.all())

    plan = {
        "A": (raw.empty, inner, None),
        "B": (lambda: empty_host.engine.plugin_control("empty", 0), inner, None),
        "C": (raw.arith, inner, None),
        "D": (lambda: arith_host.engine.plugin_control("arith", 0, operands), inner, None),
        "E": (lambda: native_tx.max_data_cycle(native_rx), inner, None),
        "F": (lambda: plugin_tx.max_data_cycle(plugin_rx), inner, None),
        "G": (None, 1, load_target),
    }

    results: Dict[str, BenchmarkResult] = {}
    for name in selected:
        call, calls_per_sample, setup = plan[name]
        samples = _measure(call, iterations, calls_per_sample, warmup_s, setup)
        result = BenchmarkResult(
            name=name,
            description=DESCRIPTIONS[name],
            median_ns=float(np.median(samples)),
            p10_ns=float(np.percentile(samples, 10)),
            p90_ns=float(np.percentile(samples, 90)),
            samples=iterations,
        )
        results[name] = result
        logger.info(f"Benchmark {name} ({result.description}): median {format_ns(result.median_ns)}")

    for host in (empty_host, arith_host, plugin_tx, plugin_rx):
        host.engine.close()
    return results


def ladder_holds(results: Dict[str, BenchmarkResult]) -> Dict[str, bool]:
    """Check the expected orderings A < B < C < D, E < F and G >= 100 F."""
    med = {name: r.median_ns for name, r in results.items()}
    checks = {}
    if all(k in med for k in "ABCD"):
        checks["A<B<C<D"] = med["A"] < med["B"] < med["C"] < med["D"]
    if "E" in med and "F" in med:
        checks["E<F"] = med["E"] < med["F"]
    if "F" in med and "G" in med:
        checks["G>=100F"] = med["G"] >= 100 * med["F"]
    return checks
