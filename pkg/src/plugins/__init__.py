"""
Plugin catalogue: the protocol plugins and the test/benchmark plugins, built on demand.
"""

import functools
import logging
from pathlib import Path
from typing import Callable, Dict, List

from src.plugins import ack_logger, bdp_frame, dummy_frame, privacy_padding, probe_path, testing

logger = logging.getLogger(__name__)

PLUGINS: Dict[str, Callable[[], bytes]] = {
    ack_logger.NAME: ack_logger.build,
    privacy_padding.NAME: privacy_padding.build,
    probe_path.NAME: probe_path.build,
    bdp_frame.NAME: bdp_frame.build,
    dummy_frame.NAME: dummy_frame.build,
}

TEST_PLUGINS: Dict[str, Callable[[], bytes]] = {
    "echo": testing.build_echo,
    "empty": testing.build_empty,
    "arith": testing.build_arith,
    "max_data": testing.build_max_data,
    "ack_writer": testing.build_ack_writer,
    "api_prober": testing.build_api_prober,
    "fault_trap": testing.build_fault_trap,
    "fault_fuel": testing.build_fault_fuel,
    "fault_oob": testing.build_fault_oob,
}


@functools.lru_cache(maxsize=None)
def build_plugin(name: str) -> bytes:
    """Build a plugin by catalogue name; cached so every host loads identical bytes."""
    builder = PLUGINS.get(name) or TEST_PLUGINS.get(name)
    if builder is None:
        raise KeyError(f"Unknown plugin '{name}'. Available: {sorted(PLUGINS) + sorted(TEST_PLUGINS)}")
    binary = builder()
    logger.debug(f"Built {name}: {len(binary)} octets")
    return binary


def write_plugins(out_dir: Path, names: List[str] = None) -> Dict[str, Path]:
    """Write plugin binaries as <name>.wasm; returns name -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name in names or list(PLUGINS):
        path = out_dir / f"{name}.wasm"
        path.write_bytes(build_plugin(name))
        written[name] = path
        logger.info(f"Wrote {path} ({path.stat().st_size} octets)")
    return written
