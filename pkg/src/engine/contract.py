"""
Interface every host backend implements so plugins can reach connection state.
"""

from typing import FrozenSet, Protocol, runtime_checkable

from src.common.fields import ConnectionField
from src.common.values import PluginVal


@runtime_checkable
class HostConnectionContract(Protocol):
    """
    get_field after a successful set_field returns the value that was set
    (modulo documented clamping). Unsupported fields are absent from
    supported_fields().
    """

    def get_field(self, field: ConnectionField) -> PluginVal:
        """Raises KeyError for fields the host does not support."""
        ...

    def set_field(self, field: ConnectionField, value: PluginVal) -> None:
        """Raises KeyError (unsupported), PermissionError (read-only) or ValueError (rejected value)."""
        ...

    def supported_fields(self) -> FrozenSet[ConnectionField]:
        ...


def check_field_value(field: ConnectionField, value: PluginVal) -> None:
    """Raise TypeError when `value` is not the variant registered for `field`."""
    expected = field.spec.kind
    if value.kind != expected:
        raise TypeError(f"{field.name} expects {expected.name}, got {value.kind.name}")
