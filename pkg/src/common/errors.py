"""
Error types and status codes shared by hosts and plugins.

Exceptions are raised on the host side; plugins only ever see the integer
StatusCode returned by an API call.
"""

from enum import Enum, IntEnum


class StatusCode(IntEnum):
    """Integer status space visible to plugin code (engine reserves -1..-64)."""
    OK = 0
    PERMISSION_ERROR = -1
    INVALID_CAPABILITY = -2
    RANGE_ERROR = -3
    NOT_AVAILABLE = -4
    ROUTINE_ABORTED = -5
    INPUT_MISSING = -6
    TYPE_MISMATCH = -7
    DECODE_ERROR = -8
    NO_SUCH_FILE = -9
    # Returned by a PrepareFrame hook to stop the current packet batch
    HALT_SENDING = -32

    @classmethod
    def is_engine_reserved(cls, value: int) -> bool:
        return -64 <= value < 0


class TransportErrorCode(IntEnum):
    """QUIC transport error codes used when closing a connection."""
    NO_ERROR = 0x00
    INTERNAL_ERROR = 0x01
    FLOW_CONTROL_ERROR = 0x03
    FRAME_ENCODING_ERROR = 0x07
    TRANSPORT_PARAMETER_ERROR = 0x08
    PROTOCOL_VIOLATION = 0x0A


class CoreQuicError(Exception):
    """Base class for every error raised by this package."""


class EncodingRange(CoreQuicError, ValueError):
    """Value does not fit the 62-bit varint space."""


class Truncated(CoreQuicError):
    """Input ended before a complete value could be read."""


class DecodeError(CoreQuicError):
    """Octets do not form a valid encoding."""


class BadExportName(CoreQuicError):
    """Exported plugin function name does not follow the routine naming convention."""


class RejectReason(Enum):
    BAD_NAME = "BadName"
    MISSING_FIELD = "MissingField"
    DEFINE_CONFLICT = "DefineConflict"
    BAD_MODULE = "BadModule"


class LoadRejected(CoreQuicError):
    """Plugin refused at load time."""

    def __init__(self, reason: RejectReason, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)


class RoutineAborted(CoreQuicError):
    """Plugin code trapped, ran out of fuel or breached a contract; plugin detached."""

    def __init__(self, plugin_id: str, detail: str = ""):
        self.plugin_id = plugin_id
        super().__init__(f"plugin {plugin_id} aborted: {detail}")


class NoSuchPlugin(CoreQuicError, KeyError):
    pass


class NotAvailable(CoreQuicError):
    """Requested routine is not provided by any plugin on this connection."""


class PluginPermissionError(CoreQuicError, PermissionError):
    pass


class InvalidCapability(CoreQuicError):
    pass


class CapabilityRangeError(CoreQuicError):
    pass


class TransportError(CoreQuicError):
    """Connection-level error; the connection closes with `code`."""

    def __init__(self, code: TransportErrorCode, reason: str = ""):
        self.code = code
        self.reason = reason
        super().__init__(f"{code.name}: {reason}")


class ScenarioTimeout(CoreQuicError):
    """Simulated transfer did not finish before the virtual deadline."""

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)
