"""
Registry of connection state a plugin may get or set.

Each field maps to exactly one PluginVal variant, identically on every host.
The numeric value of a field is its identifier on the plugin boundary.
"""

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Dict, FrozenSet, Iterable

from src.common.values import ValKind


class FieldGroup(Enum):
    CONNECTION = "connection"
    SPACE = "space"
    RECOVERY = "recovery"


class ConnectionField(IntEnum):
    # Connection-wide
    IS_SERVER = 0x00
    MAX_TX_DATA = 0x01
    TX_DATA = 0x02
    MAX_RX_DATA = 0x03
    RX_DATA = 0x04
    MTU = 0x05
    PEER_ADDR = 0x06
    LOCAL_ADDR = 0x07
    IS_ESTABLISHED = 0x08
    IDLE_TIMEOUT = 0x09
    # Packet number space
    NEXT_PKT_NUM = 0x20
    LARGEST_RX_PKT_NUM = 0x21
    ACK_ELICITING_IN_FLIGHT = 0x22
    # Recovery (RFC 9002)
    CWND = 0x40
    SSTHRESH = 0x41
    BYTES_IN_FLIGHT = 0x42
    SMOOTHED_RTT = 0x43
    RTT_VAR = 0x44
    MIN_RTT = 0x45
    LATEST_RTT = 0x46
    LOSS_COUNT = 0x47
    PACING_RATE = 0x48
    IN_SLOW_START = 0x49

    @property
    def spec(self) -> "FieldSpec":
        return FIELD_SPECS[self]

    @classmethod
    def by_name(cls, name: str) -> "ConnectionField":
        """Look up a field by its snake or upper-case name (e.g. 'cwnd')."""
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise KeyError(f"Unknown connection field: {name}") from None


@dataclass(frozen=True)
class FieldSpec:
    group: FieldGroup
    kind: ValKind
    writable: bool


_C, _S, _R = FieldGroup.CONNECTION, FieldGroup.SPACE, FieldGroup.RECOVERY

FIELD_SPECS: Dict[ConnectionField, FieldSpec] = {
    ConnectionField.IS_SERVER: FieldSpec(_C, ValKind.BOOL, False),
    ConnectionField.MAX_TX_DATA: FieldSpec(_C, ValKind.U64, True),
    ConnectionField.TX_DATA: FieldSpec(_C, ValKind.U64, False),
    ConnectionField.MAX_RX_DATA: FieldSpec(_C, ValKind.U64, True),
    ConnectionField.RX_DATA: FieldSpec(_C, ValKind.U64, False),
    ConnectionField.MTU: FieldSpec(_C, ValKind.USIZE, False),
    ConnectionField.PEER_ADDR: FieldSpec(_C, ValKind.SOCKET_ADDR, False),
    ConnectionField.LOCAL_ADDR: FieldSpec(_C, ValKind.SOCKET_ADDR, False),
    ConnectionField.IS_ESTABLISHED: FieldSpec(_C, ValKind.BOOL, False),
    ConnectionField.IDLE_TIMEOUT: FieldSpec(_C, ValKind.DURATION, True),
    ConnectionField.NEXT_PKT_NUM: FieldSpec(_S, ValKind.U64, False),
    ConnectionField.LARGEST_RX_PKT_NUM: FieldSpec(_S, ValKind.U64, False),
    ConnectionField.ACK_ELICITING_IN_FLIGHT: FieldSpec(_S, ValKind.U64, False),
    ConnectionField.CWND: FieldSpec(_R, ValKind.U64, True),
    ConnectionField.SSTHRESH: FieldSpec(_R, ValKind.U64, True),
    ConnectionField.BYTES_IN_FLIGHT: FieldSpec(_R, ValKind.U64, False),
    ConnectionField.SMOOTHED_RTT: FieldSpec(_R, ValKind.DURATION, False),
    ConnectionField.RTT_VAR: FieldSpec(_R, ValKind.DURATION, False),
    ConnectionField.MIN_RTT: FieldSpec(_R, ValKind.DURATION, False),
    ConnectionField.LATEST_RTT: FieldSpec(_R, ValKind.DURATION, False),
    ConnectionField.LOSS_COUNT: FieldSpec(_R, ValKind.U64, False),
    ConnectionField.PACING_RATE: FieldSpec(_R, ValKind.U64, True),
    ConnectionField.IN_SLOW_START: FieldSpec(_R, ValKind.BOOL, True),
}

ALL_FIELDS: FrozenSet[ConnectionField] = frozenset(ConnectionField)


def fields_in_groups(groups: Iterable[FieldGroup]) -> FrozenSet[ConnectionField]:
    wanted = set(groups)
    return frozenset(f for f, spec in FIELD_SPECS.items() if spec.group in wanted)


def host_profile_fields(profile) -> FrozenSet[ConnectionField]:
    """
    Resolve a host profile from config into a field set.

    Args:
        profile: "all", or a list of group names and/or field names
    """
    if profile == "all":
        return ALL_FIELDS
    selected = set()
    for entry in profile:
        try:
            selected |= fields_in_groups([FieldGroup(entry)])
        except ValueError:
            selected.add(ConnectionField.by_name(entry))
    return frozenset(selected)
