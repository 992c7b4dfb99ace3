"""
Capability grants for a loaded plugin.
"""

from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional

from src.common.fields import ConnectionField

GRANT_NAMES = ("read", "write", "register", "bytes", "file", "timer", "control")


@dataclass(frozen=True)
class PermissionSet:
    """
    Default-deny grant set. WriteFields implies ReadFields.

    `field_allow` restricts field access to the listed fields when set;
    `field_deny` always wins.
    """
    read_fields: bool = False
    write_fields: bool = False
    registration: bool = False
    bytes_api: bool = False
    file_api: bool = False
    timer_api: bool = False
    plugin_control_api: bool = False
    field_allow: Optional[FrozenSet[ConnectionField]] = None
    field_deny: FrozenSet[ConnectionField] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.write_fields and not self.read_fields:
            object.__setattr__(self, "read_fields", True)
        if self.field_allow is not None:
            object.__setattr__(self, "field_allow", frozenset(self.field_allow))
        object.__setattr__(self, "field_deny", frozenset(self.field_deny))

    @classmethod
    def from_names(cls, names: Iterable[str], **overrides) -> "PermissionSet":
        """Build from grant names such as ["read", "file"]."""
        grants = set()
        for name in names:
            name = name.strip().lower()
            if not name:
                continue
            if name not in GRANT_NAMES:
                raise ValueError(f"Unknown permission '{name}', expected one of {GRANT_NAMES}")
            grants.add(name)
        return cls(
            read_fields="read" in grants,
            write_fields="write" in grants,
            registration="register" in grants,
            bytes_api="bytes" in grants,
            file_api="file" in grants,
            timer_api="timer" in grants,
            plugin_control_api="control" in grants,
            **overrides,
        )

    @classmethod
    def all(cls) -> "PermissionSet":
        return cls.from_names(GRANT_NAMES)

    @classmethod
    def none(cls) -> "PermissionSet":
        return cls()

    @classmethod
    def parse(cls, spec: str, profiles: Optional[dict] = None) -> "PermissionSet":
        """
        Parse a CLI permission spec: a profile name from config, or a comma list.

        Args:
            spec: e.g. "trusted" or "read,file"
            profiles: name -> grant list mapping (config permission_profiles)
        """
        if profiles and spec in profiles:
            return cls.from_names(profiles[spec] or [])
        return cls.from_names(spec.split(","))

    def names(self) -> list:
        flags = (self.read_fields, self.write_fields, self.registration, self.bytes_api,
                 self.file_api, self.timer_api, self.plugin_control_api)
        return [name for name, granted in zip(GRANT_NAMES, flags) if granted]

    def _field_allowed(self, fld: ConnectionField) -> bool:
        if fld in self.field_deny:
            return False
        return self.field_allow is None or fld in self.field_allow

    def can_read(self, fld: ConnectionField) -> bool:
        return self.read_fields and self._field_allowed(fld)

    def can_write(self, fld: ConnectionField) -> bool:
        return self.write_fields and self._field_allowed(fld)
