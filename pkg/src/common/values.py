"""
PluginVal and the small value types it carries across the host/plugin boundary.

All values are immutable; validation happens at construction so that anything
that exists can be encoded.
"""

import ipaddress
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Union

from src.common.varint import VARINT_MAX

U64_MAX = (1 << 64) - 1
U32_MAX = (1 << 32) - 1
RAW_BUFFER_MAX = 4096
TP_VALUE_MAX = 256

IpAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]


class ValKind(IntEnum):
    """PluginVal variant tag; the value is the first octet of the encoding."""
    BOOL = 1
    I32 = 2
    I64 = 3
    U32 = 4
    U64 = 5
    USIZE = 6
    DURATION = 7
    INSTANT = 8
    SOCKET_ADDR = 9
    QUIC_FRAME = 10
    TRANSPORT_PARAM = 11
    BYTES = 12
    RAW_BUFFER = 13


# (min, max) per integer variant
INT_RANGES = {
    ValKind.I32: (-(1 << 31), (1 << 31) - 1),
    ValKind.I64: (-(1 << 63), (1 << 63) - 1),
    ValKind.U32: (0, U32_MAX),
    ValKind.U64: (0, U64_MAX),
    ValKind.USIZE: (0, U64_MAX),
    ValKind.DURATION: (0, U64_MAX),
    ValKind.INSTANT: (0, U64_MAX),
}


@dataclass(frozen=True)
class SocketAddr:
    ip: IpAddress
    port: int

    def __post_init__(self):
        if isinstance(self.ip, str):
            object.__setattr__(self, "ip", ipaddress.ip_address(self.ip))
        if not 0 <= self.port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.port}")

    @classmethod
    def parse(cls, text: str) -> "SocketAddr":
        """Parse 'a.b.c.d:port' or '[v6]:port'."""
        host, _, port = text.rpartition(":")
        return cls(ipaddress.ip_address(host.strip("[]")), int(port))

    def identity(self) -> str:
        """Filesystem-safe rendering: decimal address octets and port, e.g. '10-0-0-2-4433'."""
        return "-".join(str(octet) for octet in self.ip.packed) + f"-{self.port}"

    def __str__(self) -> str:
        if self.ip.version == 6:
            return f"[{self.ip}]:{self.port}"
        return f"{self.ip}:{self.port}"


@dataclass(frozen=True)
class BytesCapability:
    """Tag granting bounded access to one host buffer for one routine invocation."""
    tag: int
    max_read_len: int
    max_write_len: int

    def __post_init__(self):
        for name in ("tag", "max_read_len", "max_write_len"):
            value = getattr(self, name)
            if not 0 <= value <= U64_MAX:
                raise ValueError(f"{name} out of range: {value}")


@dataclass(frozen=True)
class TransportParameter:
    param_type: int
    value: bytes = b""

    def __post_init__(self):
        if not 0 <= self.param_type <= VARINT_MAX:
            raise ValueError(f"transport parameter type out of range: {self.param_type}")
        if len(self.value) > TP_VALUE_MAX:
            raise ValueError(f"transport parameter value too long: {len(self.value)}")
        object.__setattr__(self, "value", bytes(self.value))


@dataclass(frozen=True)
class PluginVal:
    """
    The single tagged value exchanged between hosts and plugins.

    Build values through the named constructors (`PluginVal.u64(5)`), which
    validate ranges for the chosen variant.
    """
    kind: ValKind
    value: Any

    def __post_init__(self):
        from src.common.frames import Frame, is_frame

        kind, value = self.kind, self.value
        if kind == ValKind.BOOL:
            if not isinstance(value, bool):
                raise TypeError("Bool requires a bool")
        elif kind in INT_RANGES:
            low, high = INT_RANGES[kind]
            if isinstance(value, bool) or not isinstance(value, int) or not low <= value <= high:
                raise ValueError(f"{kind.name} out of range: {value!r}")
        elif kind == ValKind.SOCKET_ADDR:
            if not isinstance(value, SocketAddr):
                raise TypeError("SocketAddr requires a SocketAddr")
        elif kind == ValKind.QUIC_FRAME:
            if not is_frame(value):
                raise TypeError(f"QuicFrame requires one of {Frame}")
        elif kind == ValKind.TRANSPORT_PARAM:
            if not isinstance(value, TransportParameter):
                raise TypeError("TransportParam requires a TransportParameter")
        elif kind == ValKind.BYTES:
            if not isinstance(value, BytesCapability):
                raise TypeError("Bytes requires a BytesCapability")
        elif kind == ValKind.RAW_BUFFER:
            if not isinstance(value, (bytes, bytearray)) or len(value) > RAW_BUFFER_MAX:
                raise ValueError("RawBuffer requires at most 4096 octets")
            object.__setattr__(self, "value", bytes(value))

    # Named constructors

    @classmethod
    def boolean(cls, value: bool) -> "PluginVal":
        return cls(ValKind.BOOL, bool(value))

    @classmethod
    def i32(cls, value: int) -> "PluginVal":
        return cls(ValKind.I32, value)

    @classmethod
    def i64(cls, value: int) -> "PluginVal":
        return cls(ValKind.I64, value)

    @classmethod
    def u32(cls, value: int) -> "PluginVal":
        return cls(ValKind.U32, value)

    @classmethod
    def u64(cls, value: int) -> "PluginVal":
        return cls(ValKind.U64, value)

    @classmethod
    def usize(cls, value: int) -> "PluginVal":
        return cls(ValKind.USIZE, value)

    @classmethod
    def duration(cls, micros: int) -> "PluginVal":
        return cls(ValKind.DURATION, micros)

    @classmethod
    def instant(cls, micros: int) -> "PluginVal":
        return cls(ValKind.INSTANT, micros)

    @classmethod
    def socket_addr(cls, addr: SocketAddr) -> "PluginVal":
        return cls(ValKind.SOCKET_ADDR, addr)

    @classmethod
    def frame(cls, frame) -> "PluginVal":
        return cls(ValKind.QUIC_FRAME, frame)

    @classmethod
    def transport_param(cls, tp: TransportParameter) -> "PluginVal":
        return cls(ValKind.TRANSPORT_PARAM, tp)

    @classmethod
    def bytes_cap(cls, cap: BytesCapability) -> "PluginVal":
        return cls(ValKind.BYTES, cap)

    @classmethod
    def raw(cls, data: bytes) -> "PluginVal":
        return cls(ValKind.RAW_BUFFER, bytes(data))

    @classmethod
    def text(cls, message: str) -> "PluginVal":
        return cls.raw(message.encode("utf-8")[:RAW_BUFFER_MAX])

    def is_scalar(self) -> bool:
        """True for variants that are a single fixed-width integer or bool."""
        return self.kind == ValKind.BOOL or self.kind in INT_RANGES

    def as_int(self) -> int:
        if not self.is_scalar():
            raise TypeError(f"{self.kind.name} is not an integer variant")
        return int(self.value)

    def __repr__(self) -> str:
        return f"{self.kind.name}({self.value!r})"
