"""
Command-line run settings: flags merged over an optional key=value file.

File format, one setting per line:

    # lines starting with '#' are comments
    rate = 10
    rtt = 100
    plugin = bdp_frame, privacy_padding

Keys are RunConfig field names (dashes and underscores are interchangeable).
Values given on the command line win over the file.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.config import config
from src.netsim.link import LinkModel
from src.quic import BACKENDS

logger = logging.getLogger(__name__)

MODES = ("netsim", "udp")
ROLES = ("client", "server")
_LIST_FIELDS = {"plugin", "peer_plugin", "control", "backends", "only"}
DEFAULT_TRANSFER_OCTETS = 1_000_000


@dataclass
class RunConfig:
    # common
    seed: int = 1
    out: Optional[str] = None
    mtu: Optional[int] = None
    rate: Optional[float] = None        # Mbit/s
    rtt: Optional[float] = None         # ms
    loss: float = 0.0
    queue: Optional[int] = None         # packets
    sandbox: Optional[str] = None
    # run
    role: str = "client"
    mode: str = "netsim"
    backend: str = "alpha"
    peer_backend: str = "alpha"
    bind: str = "127.0.0.1:0"
    peer: Optional[str] = None
    size: Optional[int] = None         # octets; run defaults to DEFAULT_TRANSFER_OCTETS
    plugin: List[str] = field(default_factory=list)
    peer_plugin: List[str] = field(default_factory=list)
    permissions: Optional[str] = None
    host_profile: str = "full"
    control: List[str] = field(default_factory=list)
    timeout: float = 60.0
    # experiment
    runs: Optional[int] = None
    backends: List[str] = field(default_factory=list)
    charts: bool = True
    # bench
    iterations: Optional[int] = None
    warmup: Optional[float] = None
    only: List[str] = field(default_factory=list)

    def validate(self) -> "RunConfig":
        """Raise ValueError on the first inconsistent setting."""
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got '{self.role}'")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        for backend in [self.backend, self.peer_backend] + self.backends:
            if backend not in BACKENDS:
                raise ValueError(f"Unknown backend '{backend}'. Available: {sorted(BACKENDS)}")
        if self.host_profile not in config.host_profiles:
            raise ValueError(f"Unknown host profile '{self.host_profile}'. "
                             f"Available: {sorted(config.host_profiles)}")
        if self.size is not None and self.size <= 0:
            raise ValueError(f"size must be positive, got {self.size}")
        if self.runs is not None and self.runs <= 0:
            raise ValueError(f"runs must be positive, got {self.runs}")
        if self.iterations is not None and self.iterations <= 0:
            raise ValueError(f"iterations must be positive, got {self.iterations}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")
        if self.mode == "udp" and self.role == "client" and not self.peer:
            raise ValueError("A UDP client needs --peer host:port")
        if self.mode == "udp" and self.peer_plugin:
            raise ValueError("--peer-plugin only applies in netsim mode")
        for spec in self.control:
            parse_control(spec)
        # LinkModel checks rate, delay, loss and queue ranges
        self.link_model()
        return self

    def link_model(self) -> LinkModel:
        """Link from config `link`, overridden by rate, rtt, loss and queue."""
        return LinkModel.from_config(rate_bps=self.rate * 1e6 if self.rate is not None else None,
                                     rtt_ms=self.rtt, queue_packets=self.queue, loss_prob=self.loss,
                                     seed=self.seed, mtu=self.mtu)


def parse_control(spec: str) -> Dict[str, Any]:
    """
    Parse "plugin:op[:arg[,arg...]][@ms]".

    Returns:
        Dict with plugin, op, args (list of ints) and at_ms

    Raises:
        ValueError: Malformed spec
    """
    body, _, at = spec.partition("@")
    parts = body.split(":")
    if len(parts) < 2 or not parts[0]:
        raise ValueError(f"Control must be plugin:op[:arg][@ms], got '{spec}'")
    try:
        op = int(parts[1], 0)
        args = [int(a, 0) for a in ":".join(parts[2:]).split(",") if a] if len(parts) > 2 else []
        at_ms = float(at) if at else 0.0
    except ValueError:
        raise ValueError(f"Control '{spec}' has a non-numeric op, argument or time") from None
    if op < 0 or any(a < 0 for a in args) or at_ms < 0:
        raise ValueError(f"Control '{spec}' has a negative value")
    return {"plugin": parts[0], "op": op, "args": args, "at_ms": at_ms}


def _normalise_key(key: str) -> str:
    return key.strip().replace("-", "_")


def _coerce(name: str, raw: str) -> Any:
    f = {f.name: f for f in dataclasses.fields(RunConfig)}[name]
    default = f.default if f.default is not dataclasses.MISSING else None
    if name in _LIST_FIELDS:
        return [item.strip() for item in raw.split(",") if item.strip()]
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"{name}: expected a boolean, got '{raw}'")
        return lowered in ("true", "yes", "1")
    text = raw.strip()
    if name in ("seed", "mtu", "queue", "size", "runs", "iterations"):
        return int(text, 0)
    if name in ("rate", "rtt", "loss", "timeout", "warmup"):
        return float(text)
    return text


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Parse a key=value settings file.

    Raises:
        FileNotFoundError: Missing file
        ValueError: Malformed line, unknown key or bad value
    """
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values: Dict[str, Any] = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ValueError(f"{path}:{number}: expected key=value, got '{stripped}'")
        name = _normalise_key(key)
        if name not in known:
            raise ValueError(f"{path}:{number}: unknown key '{key.strip()}'")
        try:
            values[name] = _coerce(name, raw)
        except ValueError as e:
            raise ValueError(f"{path}:{number}: {e}") from None
    logger.debug(f"Read {len(values)} settings from {path}")
    return values


def build_run_config(overrides: Dict[str, Any], config_file: Optional[str] = None) -> RunConfig:
    """
    Merge command-line values over the file settings and validate the result.

    Args:
        overrides: Flag values; None means "not given"
        config_file: Optional key=value file

    Raises:
        ValueError: Unknown key or invalid setting
    """
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values = read_config_file(config_file) if config_file else {}
    for key, value in overrides.items():
        name = _normalise_key(key)
        if name not in known:
            raise ValueError(f"Unknown setting '{key}'")
        if value is None or value == []:
            continue
        values[name] = value
    return RunConfig(**values).validate()
