"""
Host side of the plugin-facing API.

Every import a plugin may call is defined here and bound to one PluginHandle.
All calls return a StatusCode on failure; only guest memory faults escape as
exceptions, which abort the running hook.
"""

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import wasmtime

from src.common.abi import ABI_NAMESPACE, FILE_APPEND, FILE_READ, FILE_WRITE, IMPORTS
from src.common.codec import decode_plugin_val, decode_plugin_val_prefix, encode_plugin_val
from src.common.errors import (
    CapabilityRangeError,
    DecodeError,
    InvalidCapability,
    NotAvailable,
    PluginPermissionError,
    RoutineAborted,
    StatusCode,
)
from src.common.fields import ConnectionField
from src.common.values import U64_MAX
from src.common.varint import VARINT_MAX
from src.engine.contract import check_field_value
from src.engine.plugin import PluginHandle
from src.engine.runtime import func_type

if TYPE_CHECKING:
    from src.engine.engine import PluginEngine

logger = logging.getLogger(__name__)

MAX_LOG_LINE = 1024
MAX_PATH = 255


class GuestMemoryFault(RoutineAborted):
    """Plugin passed a pointer/length outside its own linear memory."""


def to_i64(value: int) -> int:
    """Reinterpret an unsigned 64-bit value as the signed i64 wasm expects."""
    value &= U64_MAX
    return value - (1 << 64) if value >= (1 << 63) else value


def to_u64(value: int) -> int:
    return value & U64_MAX


class HostApi:
    """Import functions for one plugin instance."""

    def __init__(self, engine: "PluginEngine", handle: PluginHandle):
        self.engine = engine
        self.handle = handle
        self.plugin_log = logging.getLogger(f"src.engine.plugins.{handle.plugin_id}")

    def link(self, linker: wasmtime.Linker) -> None:
        for name, (params, results) in IMPORTS.items():
            linker.define_func(ABI_NAMESPACE, name, func_type(params, results), self._entry(name))

    def _entry(self, name: str) -> Callable:
        method = getattr(self, f"api_{name}")

        def entry(*args):
            self.engine.api_calls += 1
            return int(method(*args))

        return entry

    # -- guest memory -----------------------------------------------------

    def _check_span(self, ptr: int, length: int) -> None:
        size = self.handle.memory.data_len(self.handle.store)
        if ptr < 0 or length < 0 or ptr + length > size:
            raise GuestMemoryFault(self.handle.plugin_id,
                                   f"span [{ptr}, {ptr + length}) outside linear memory of {size}")

    def read_mem(self, ptr: int, length: int) -> bytes:
        self._check_span(ptr, length)
        return bytes(self.handle.memory.read(self.handle.store, ptr, ptr + length))

    def write_mem(self, ptr: int, data: bytes) -> None:
        self._check_span(ptr, len(data))
        if data:
            self.handle.memory.write(self.handle.store, data, ptr)

    def _copy_out(self, data: bytes, ptr: int, cap: int) -> int:
        if len(data) > cap:
            return StatusCode.RANGE_ERROR
        self.write_mem(ptr, data)
        return len(data)

    # -- parameter communication -----------------------------------------

    def api_get_input(self, index: int, ptr: int, cap: int) -> int:
        inputs = self.handle.inputs
        if not 0 <= index < len(inputs):
            return StatusCode.INPUT_MISSING
        return self._copy_out(encode_plugin_val(inputs[index]), ptr, cap)

    def api_input_count(self) -> int:
        return len(self.handle.inputs)

    def api_save_output(self, ptr: int, length: int) -> int:
        data = self.read_mem(ptr, length)
        try:
            value = decode_plugin_val(data)
        except DecodeError as e:
            logger.debug(f"{self.handle.plugin_id} saved undecodable output: {e}")
            return StatusCode.DECODE_ERROR
        self.handle.outputs.append(value)
        return StatusCode.OK

    # -- connection fields -------------------------------------------------

    def _field(self, field_id: int):
        try:
            fld = ConnectionField(field_id)
        except ValueError:
            return None
        if fld not in self.engine.host.supported_fields():
            return None
        return fld

    def api_get_field(self, field_id: int, ptr: int, cap: int) -> int:
        fld = self._field(field_id)
        if fld is None:
            return StatusCode.NOT_AVAILABLE
        if not self.handle.permissions.can_read(fld):
            return StatusCode.PERMISSION_ERROR
        value = self.engine.host.get_field(fld)
        return self._copy_out(encode_plugin_val(value), ptr, cap)

    def api_set_field(self, field_id: int, ptr: int, length: int) -> int:
        data = self.read_mem(ptr, length)
        fld = self._field(field_id)
        if fld is None:
            return StatusCode.NOT_AVAILABLE
        if self.handle.read_only or not self.handle.permissions.can_write(fld) or not fld.spec.writable:
            logger.debug(f"{self.handle.plugin_id}: set_field {fld.name} denied")
            return StatusCode.PERMISSION_ERROR
        try:
            value = decode_plugin_val(data)
            check_field_value(fld, value)
        except DecodeError:
            return StatusCode.DECODE_ERROR
        except TypeError:
            return StatusCode.TYPE_MISMATCH
        try:
            self.engine.host.set_field(fld, value)
        except PermissionError:
            return StatusCode.PERMISSION_ERROR
        except (ValueError, KeyError) as e:
            logger.debug(f"{self.handle.plugin_id}: set_field {fld.name} rejected: {e}")
            return StatusCode.RANGE_ERROR
        return StatusCode.OK

    # -- bytes -------------------------------------------------------------

    def api_bytes_read(self, tag: int, offset: int, ptr: int, length: int) -> int:
        if not self.handle.permissions.bytes_api:
            return StatusCode.PERMISSION_ERROR
        try:
            data = self.engine.bytes_read(to_u64(tag), offset, length)
        except InvalidCapability:
            return StatusCode.INVALID_CAPABILITY
        except CapabilityRangeError:
            return StatusCode.RANGE_ERROR
        self.write_mem(ptr, data)
        return len(data)

    def api_bytes_write(self, tag: int, offset: int, ptr: int, length: int) -> int:
        if not self.handle.permissions.bytes_api or self.handle.read_only:
            return StatusCode.PERMISSION_ERROR
        data = self.read_mem(ptr, length)
        try:
            return self.engine.bytes_write(to_u64(tag), offset, data)
        except InvalidCapability:
            return StatusCode.INVALID_CAPABILITY
        except CapabilityRangeError:
            return StatusCode.RANGE_ERROR

    # -- files -------------------------------------------------------------

    def _sandbox_path(self, raw: bytes) -> Path:
        try:
            rel = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise PluginPermissionError("path is not utf-8") from None
        if not rel or rel.startswith("/") or "\x00" in rel:
            raise PluginPermissionError(f"invalid sandbox path {rel!r}")
        root = self.handle.sandbox_dir.resolve()
        target = (root / rel).resolve()
        if target != root and root not in target.parents:
            raise PluginPermissionError(f"path {rel!r} escapes the sandbox")
        return target

    def api_file_open(self, path_ptr: int, path_len: int, mode: int) -> int:
        if path_len > MAX_PATH:
            return StatusCode.RANGE_ERROR
        raw = self.read_mem(path_ptr, path_len)
        if not self.handle.permissions.file_api:
            return StatusCode.PERMISSION_ERROR
        modes = {FILE_READ: "rb", FILE_WRITE: "wb", FILE_APPEND: "ab"}
        if mode not in modes:
            return StatusCode.RANGE_ERROR
        try:
            path = self._sandbox_path(raw)
            if mode != FILE_READ:
                path.parent.mkdir(parents=True, exist_ok=True)
            return self.handle.open_file(open(path, modes[mode]))
        except PluginPermissionError as e:
            logger.warning(f"{self.handle.plugin_id}: file_open denied: {e}")
            return StatusCode.PERMISSION_ERROR
        except FileNotFoundError:
            return StatusCode.NO_SUCH_FILE
        except OSError as e:
            logger.debug(f"{self.handle.plugin_id}: file_open failed: {e}")
            return StatusCode.NOT_AVAILABLE

    def api_file_read(self, fd: int, ptr: int, length: int) -> int:
        if not self.handle.permissions.file_api:
            return StatusCode.PERMISSION_ERROR
        handle = self.handle.files.get(fd)
        if handle is None or "r" not in handle.mode:
            return StatusCode.INVALID_CAPABILITY
        self._check_span(ptr, length)
        data = handle.read(length)
        self.write_mem(ptr, data)
        return len(data)

    def api_file_write(self, fd: int, ptr: int, length: int) -> int:
        if not self.handle.permissions.file_api:
            return StatusCode.PERMISSION_ERROR
        data = self.read_mem(ptr, length)
        handle = self.handle.files.get(fd)
        if handle is None or "r" in handle.mode:
            return StatusCode.INVALID_CAPABILITY
        try:
            return handle.write(data)
        except OSError as e:
            logger.debug(f"{self.handle.plugin_id}: file_write failed: {e}")
            return StatusCode.NOT_AVAILABLE

    def api_file_close(self, fd: int) -> int:
        if not self.handle.permissions.file_api:
            return StatusCode.PERMISSION_ERROR
        handle = self.handle.files.pop(fd, None)
        if handle is None:
            return StatusCode.INVALID_CAPABILITY
        handle.close()
        return StatusCode.OK

    # -- registrations and activation ---------------------------------------

    def _may_mutate(self, granted: bool) -> bool:
        return granted and not self.handle.read_only

    def api_register_frame_type(self, frame_type: int) -> int:
        if not self._may_mutate(self.handle.permissions.registration):
            return StatusCode.PERMISSION_ERROR
        if not 0 <= frame_type <= VARINT_MAX:
            return StatusCode.RANGE_ERROR
        self.engine.register_frame_type(self.handle, frame_type)
        return StatusCode.OK

    def api_register_tp_type(self, tp_type: int) -> int:
        if not self._may_mutate(self.handle.permissions.registration):
            return StatusCode.PERMISSION_ERROR
        if not 0 <= tp_type <= VARINT_MAX:
            return StatusCode.RANGE_ERROR
        self.engine.register_tp_type(self.handle, tp_type)
        return StatusCode.OK

    def api_enable_plugin(self) -> int:
        if self.handle.read_only:
            return StatusCode.PERMISSION_ERROR
        self.engine.enable_plugin(self.handle.plugin_id)
        return StatusCode.OK

    # -- time --------------------------------------------------------------

    def api_set_timer(self, deadline: int, callback_tag: int) -> int:
        if self.handle.read_only:
            return StatusCode.PERMISSION_ERROR
        try:
            return self.engine.set_timer(self.handle.plugin_id, to_u64(deadline), to_u64(callback_tag))
        except PluginPermissionError:
            return StatusCode.PERMISSION_ERROR

    def api_cancel_timer(self, timer_id: int) -> int:
        if self.handle.read_only:
            return StatusCode.PERMISSION_ERROR
        try:
            self.engine.cancel_timer(self.handle.plugin_id, timer_id)
        except PluginPermissionError:
            return StatusCode.PERMISSION_ERROR
        except KeyError:
            return StatusCode.NOT_AVAILABLE
        return StatusCode.OK

    def api_current_time(self) -> int:
        return to_i64(self.engine.now())

    # -- cross-plugin control -------------------------------------------------

    def api_plugin_control(self, name_ptr: int, name_len: int, op: int,
                           args_ptr: int, args_len: int) -> int:
        name = self.read_mem(name_ptr, name_len).decode("utf-8", errors="replace")
        raw_args = self.read_mem(args_ptr, args_len)
        if not self._may_mutate(self.handle.permissions.plugin_control_api):
            return StatusCode.PERMISSION_ERROR
        args, offset = [], 0
        try:
            while offset < len(raw_args):
                value, used = decode_plugin_val_prefix(raw_args, offset)
                args.append(value)
                offset += used
        except DecodeError:
            return StatusCode.DECODE_ERROR
        try:
            result = self.engine.plugin_control(name, to_u64(op), args, caller=self.handle.plugin_id)
        except NotAvailable as e:
            logger.debug(f"{self.handle.plugin_id}: plugin_control -> {name} unavailable: {e}")
            return StatusCode.NOT_AVAILABLE
        except RoutineAborted:
            return StatusCode.ROUTINE_ABORTED
        return to_i64(result.status)

    # -- misc --------------------------------------------------------------

    def api_log_line(self, ptr: int, length: int) -> int:
        data = self.read_mem(ptr, min(length, MAX_LOG_LINE))
        self.plugin_log.info(data.decode("utf-8", errors="replace"))
        return StatusCode.OK

    def api_random_u64(self) -> int:
        return to_i64(self.engine.random_u64())
