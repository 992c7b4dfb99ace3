"""
Network simulation harness: simulated link, scenario runner, mock host,
experiment suites and the plugin micro-benchmarks.
"""

from src.netsim.benchmarks import LADDER, BenchmarkResult, ladder_holds, run_benchmarks
from src.netsim.experiments import SUITES, SuiteOptions, run_suite
from src.netsim.link import CLIENT_TO_SERVER, SERVER_TO_CLIENT, LinkModel
from src.netsim.mock_host import MockHost
from src.netsim.scenario import (
    ControlAction,
    PluginSpec,
    ScenarioConfig,
    ScenarioResult,
    run_scenario,
)

__all__ = [
    "CLIENT_TO_SERVER",
    "SERVER_TO_CLIENT",
    "LADDER",
    "SUITES",
    "BenchmarkResult",
    "ControlAction",
    "LinkModel",
    "MockHost",
    "PluginSpec",
    "ScenarioConfig",
    "ScenarioResult",
    "SuiteOptions",
    "ladder_holds",
    "run_benchmarks",
    "run_scenario",
    "run_suite",
]
