"""
Endpoint identity shared by every host: roles, default addresses and the
native transport parameter ids.
"""

from enum import Enum

# Native transport parameters (RFC 9000 section 18.2)
TP_IDLE_TIMEOUT = 0x01
TP_INITIAL_MAX_DATA = 0x04
TP_MAX_ACK_DELAY = 0x0B
NATIVE_TP_TYPES = frozenset({TP_IDLE_TIMEOUT, TP_INITIAL_MAX_DATA, TP_MAX_ACK_DELAY})

DEFAULT_CLIENT_ADDR = "10.0.0.1:50000"
DEFAULT_SERVER_ADDR = "10.0.0.2:4433"


class Role(str, Enum):
    CLIENT = "client"
    SERVER = "server"


def default_addresses(role: Role):
    """(local, peer) address text for `role`."""
    if role == Role.SERVER:
        return DEFAULT_SERVER_ADDR, DEFAULT_CLIENT_ADDR
    return DEFAULT_CLIENT_ADDR, DEFAULT_SERVER_ADDR
