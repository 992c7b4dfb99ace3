"""
Protocol routine identifiers and anchors.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from src.common.varint import VARINT_MAX


class RoutineKind(Enum):
    """Every protocol routine a compliant host exposes; value = export-name stem."""
    INIT = "init"
    WRITE_TRANSPORT_PARAMETER = "write_transport_parameter"
    DECODE_TRANSPORT_PARAMETER = "decode_transport_parameter"
    SHOULD_SEND_FRAME = "should_send_frame"
    PREPARE_FRAME = "prepare_frame"
    FRAME_WIRE_LEN = "frame_wire_len"
    WRITE_FRAME = "write_frame"
    ON_FRAME_RESERVED = "on_frame_reserved"
    NOTIFY_FRAME = "notify_frame"
    PARSE_FRAME = "parse_frame"
    PROCESS_FRAME = "process_frame"
    LOG_FRAME = "log_frame"
    ON_PLUGIN_TIMEOUT = "on_plugin_timeout"
    PLUGIN_CONTROL = "plugin_control"

    @property
    def takes_param(self) -> bool:
        return self not in PARAMLESS_KINDS

    @classmethod
    def from_stem(cls, stem: str) -> Optional["RoutineKind"]:
        return _BY_STEM.get(stem)


PARAMLESS_KINDS = frozenset({
    RoutineKind.INIT,
    RoutineKind.ON_PLUGIN_TIMEOUT,
    RoutineKind.PLUGIN_CONTROL,
})

# Routines callable while a plugin waits for transport-parameter negotiation
PRE_NEGOTIATION_KINDS = frozenset({
    RoutineKind.INIT,
    RoutineKind.WRITE_TRANSPORT_PARAMETER,
    RoutineKind.DECODE_TRANSPORT_PARAMETER,
})

_BY_STEM = {kind.value: kind for kind in RoutineKind}


class Anchor(Enum):
    BEFORE = "before"
    DEFINE = "define"
    AFTER = "after"


@dataclass(frozen=True)
class RoutineId:
    """A routine kind plus its frame / transport-parameter type, when it has one."""
    kind: RoutineKind
    param: Optional[int] = None

    def __post_init__(self):
        if self.kind.takes_param:
            if self.param is None:
                raise ValueError(f"{self.kind.name} requires a type parameter")
            if not 0 <= self.param <= VARINT_MAX:
                raise ValueError(f"routine parameter out of range: {self.param}")
        elif self.param is not None:
            raise ValueError(f"{self.kind.name} takes no parameter")

    def __str__(self) -> str:
        if self.param is None:
            return self.kind.name
        return f"{self.kind.name}(0x{self.param:x})"


INIT = RoutineId(RoutineKind.INIT)
ON_PLUGIN_TIMEOUT = RoutineId(RoutineKind.ON_PLUGIN_TIMEOUT)
PLUGIN_CONTROL = RoutineId(RoutineKind.PLUGIN_CONTROL)
