from src.common.endpoint import Role
from src.common.wire import Packet, PacketKind
from src.quic.factory import BACKENDS, Connection, create_connection, resolve_host_profile

__all__ = ["BACKENDS", "Connection", "Packet", "PacketKind", "Role", "create_connection",
           "resolve_host_profile"]
