"""
Field exposure for the beta backend.

Each field group is bound to the state object that owns it, and a field is
read or written through its group binding.
"""

from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Optional

from src.common.fields import ConnectionField, FieldGroup
from src.common.values import PluginVal, ValKind
from src.engine.contract import check_field_value

_WRAP = {
    ValKind.BOOL: PluginVal.boolean,
    ValKind.U64: PluginVal.u64,
    ValKind.USIZE: PluginVal.usize,
    ValKind.DURATION: PluginVal.duration,
    ValKind.SOCKET_ADDR: PluginVal.socket_addr,
}


@dataclass(frozen=True)
class FieldBinding:
    read: Callable[[], object]
    write: Optional[Callable[[object], None]] = None


class FieldTable:
    """
    Per-connection table from ConnectionField to its binding.

    Values are stored raw and wrapped into the field's registered PluginVal
    variant on the way out.
    """

    def __init__(self, supported):
        self._supported = frozenset(supported)
        self._bindings: Dict[ConnectionField, FieldBinding] = {}

    def bind(self, group: FieldGroup, bindings: Dict[ConnectionField, FieldBinding]) -> None:
        for fld, binding in bindings.items():
            if fld.spec.group != group:
                raise ValueError(f"{fld.name} does not belong to the {group.value} group")
            self._bindings[fld] = binding

    def _binding(self, fld: ConnectionField) -> FieldBinding:
        if fld not in self._supported or fld not in self._bindings:
            raise KeyError(f"{fld.name} is not supported by this host")
        return self._bindings[fld]

    def get(self, fld: ConnectionField) -> PluginVal:
        return _WRAP[fld.spec.kind](self._binding(fld).read())

    def set(self, fld: ConnectionField, value: PluginVal) -> None:
        binding = self._binding(fld)
        if binding.write is None or not fld.spec.writable:
            raise PermissionError(f"{fld.name} is read-only")
        check_field_value(fld, value)
        binding.write(value.value)

    def supported_fields(self) -> FrozenSet[ConnectionField]:
        return self._supported
