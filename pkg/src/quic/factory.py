"""
Backend selection for quic-lite connections.
"""

from typing import Dict, FrozenSet, List, Optional, Protocol, Sequence, Type

from src.common.fields import ConnectionField, host_profile_fields
from src.common.values import PluginVal
from src.common.wire import Packet
from src.config import config
from src.engine.engine import PluginEngine, RoutineResult
from src.engine.permissions import PermissionSet
from src.engine.plugin import PluginHandle
from src.quic.alpha.connection import AlphaConnection
from src.quic.beta.connection import BetaConnection


class Connection(Protocol):
    """What drivers and the plugin engine rely on; each backend implements it on its own."""

    backend: str
    engine: PluginEngine
    established: bool
    closed: bool
    close_code: Optional[int]
    stats: Dict[str, int]
    contract_breaches: int

    @property
    def now(self) -> int: ...

    @property
    def cwnd(self) -> int: ...

    @property
    def closing(self) -> bool: ...

    @property
    def transfer_complete(self) -> bool: ...

    @property
    def send_complete(self) -> bool: ...

    def connect(self, now: int) -> None: ...

    def receive_packet(self, data: bytes, now: int) -> None: ...

    def next_timeout(self) -> Optional[int]: ...

    def handle_timeout(self, now: int) -> None: ...

    def send_packets(self, now: int) -> List[Packet]: ...

    def send_stream_data(self, data: Optional[bytes] = None, length: Optional[int] = None,
                         fin: bool = True) -> None: ...

    def close(self, code: int = 0, reason: bytes = b"") -> None: ...

    def shutdown(self) -> None: ...

    def frames_in_flight(self) -> List[int]: ...

    def supported_fields(self) -> FrozenSet[ConnectionField]: ...

    def get_field(self, fld: ConnectionField) -> PluginVal: ...

    def set_field(self, fld: ConnectionField, value: PluginVal) -> None: ...

    def load_plugin(self, bytecode: bytes, permissions: PermissionSet,
                    name: Optional[str] = None) -> PluginHandle: ...

    def plugin_control(self, plugin_id: str, op: int,
                       args: Sequence[PluginVal] = ()) -> RoutineResult: ...

    def log_frame(self, frame) -> str: ...


BACKENDS: Dict[str, Type[Connection]] = {
    AlphaConnection.backend: AlphaConnection,
    BetaConnection.backend: BetaConnection,
}


def resolve_host_profile(name: str) -> FrozenSet[ConnectionField]:
    """Fields exposed under a named host profile (config `host_profiles`)."""
    profiles = config.host_profiles
    if name not in profiles:
        raise ValueError(f"Unknown host profile '{name}'. Available: {sorted(profiles)}")
    return host_profile_fields(profiles[name])


def create_connection(backend: str, role, host_profile: str = None, **kwargs) -> Connection:
    """
    Create a connection on the named backend.

    Args:
        backend: "alpha" or "beta"
        role: "client" or "server"
        host_profile: Restrict the exposed fields to a named profile
        **kwargs: Forwarded to the backend constructor (mtu, seed, sandbox_root, ...)
    """
    try:
        cls = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"Unknown backend '{backend}'. Available: {sorted(BACKENDS)}") from None
    if host_profile is not None:
        kwargs['supported_fields'] = resolve_host_profile(host_profile)
    return cls(role, **kwargs)
