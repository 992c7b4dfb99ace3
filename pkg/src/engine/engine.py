"""
Per-connection pluginization engine.

Loads sandboxed plugin modules, validates them against the host, and dispatches
protocol routines across the Before / Define / After anchors.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import wasmtime

from src.common.errors import (
    BadExportName,
    LoadRejected,
    NoSuchPlugin,
    NotAvailable,
    PluginPermissionError,
    RejectReason,
    RoutineAborted,
    StatusCode,
)
from src.common.export_names import RESERVED_EXPORTS, parse_export_name
from src.common.fields import ConnectionField
from src.common.routines import INIT, ON_PLUGIN_TIMEOUT, PLUGIN_CONTROL, Anchor, RoutineId
from src.common.values import BytesCapability, PluginVal, ValKind
from src.config import config
from src.engine.api import HostApi
from src.engine.capabilities import CapabilityTable
from src.engine.contract import HostConnectionContract
from src.engine.permissions import PermissionSet
from src.engine.plugin import Phase, PluginHandle, TimerRegistration
from src.engine.runtime import SANDBOX_ERRORS, compile_module, is_hook_signature, new_store, runtime_engine
from src.sdk.binary import read_manifest

logger = logging.getLogger(__name__)

MAX_TIMER_ROUNDS = 1000


@dataclass
class RoutineResult:
    outputs: List[PluginVal] = field(default_factory=list)
    status: int = StatusCode.OK
    # capability tag -> octets written by the plugin during the invocation
    written: Dict[int, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == StatusCode.OK

    def output(self, index: int, kind: Optional[ValKind] = None) -> PluginVal:
        """Fetch an output; ValueError when it is absent or of another kind."""
        if index >= len(self.outputs):
            raise ValueError(f"routine produced {len(self.outputs)} outputs, wanted index {index}")
        value = self.outputs[index]
        if kind is not None and value.kind != kind:
            raise ValueError(f"output {index} is {value.kind.name}, expected {kind.name}")
        return value


@dataclass
class Registrations:
    frame_types: List[Tuple[int, str]] = field(default_factory=list)
    tp_types: List[Tuple[int, str]] = field(default_factory=list)

    def frame_owner(self, frame_type: int) -> Optional[str]:
        return next((pid for t, pid in self.frame_types if t == frame_type), None)

    def has_frame(self, frame_type: int) -> bool:
        return self.frame_owner(frame_type) is not None

    def has_tp(self, tp_type: int) -> bool:
        return any(t == tp_type for t, _ in self.tp_types)


class PluginEngine:
    """
    One engine per connection.

    Args:
        host: Connection implementing HostConnectionContract
        clock: Returns the host's current time in microseconds
        seed: Seed for the plugin-visible random generator
        sandbox_root: Parent directory of the per-plugin file sandboxes
        fuel_per_call: Instruction budget granted to each hook invocation
    """

    def __init__(self, host: HostConnectionContract, clock: Optional[Callable[[], int]] = None,
                 seed: int = 0, sandbox_root: Optional[Path] = None,
                 fuel_per_call: Optional[int] = None, max_control_depth: Optional[int] = None):
        self.host = host
        self._clock = clock or (lambda: time.monotonic_ns() // 1000)
        self._rng = np.random.default_rng(seed)
        self.sandbox_root = Path(sandbox_root or config.sandbox_dir)
        self.fuel_per_call = fuel_per_call or config.engine['fuel_per_call']
        self.max_control_depth = max_control_depth or config.engine['max_control_depth']

        self.plugins: Dict[str, PluginHandle] = {}
        self.poisoned: Dict[str, str] = {}
        self._define_owner: Dict[RoutineId, str] = {}
        self._caps = CapabilityTable()
        self._load_counter = 0
        self._timer_counter = 0
        self._seq = 0
        self._depth = 0
        self._active: List[str] = []
        self.api_calls = 0

    # ------------------------------------------------------------------
    # Loading
    # ------------------------------------------------------------------

    def load_plugin(self, bytecode: bytes, permissions: PermissionSet,
                    name: Optional[str] = None) -> PluginHandle:
        """
        Validate and instantiate a plugin, then run its Init hook.

        Args:
            bytecode: WebAssembly module bytes
            permissions: Grants for this plugin on this connection
            name: Plugin id; defaults to the name in the embedded manifest

        Returns:
            PluginHandle in PreNegotiation phase (or Enabled if Init enabled it)

        Raises:
            LoadRejected: BadName, MissingField, DefineConflict or BadModule
        """
        info = compile_module(bytecode)
        manifest = read_manifest(bytecode) or {}

        hooks_by_name: Dict[str, Tuple[RoutineId, Anchor]] = {}
        for export, signature in info.function_exports.items():
            if export in RESERVED_EXPORTS:
                continue
            try:
                routine, anchor = parse_export_name(export)
            except BadExportName as e:
                raise LoadRejected(RejectReason.BAD_NAME, str(e)) from e
            if not is_hook_signature(signature):
                raise LoadRejected(RejectReason.BAD_MODULE, f"hook {export} must be (i64) -> i64")
            hooks_by_name[export] = (routine, anchor)

        self._load_counter += 1
        plugin_id = name or manifest.get("name") or f"plugin-{self._load_counter}"
        if plugin_id in self.plugins:
            raise LoadRejected(RejectReason.DEFINE_CONFLICT, f"plugin {plugin_id} already loaded")

        for export, (routine, anchor) in hooks_by_name.items():
            if anchor == Anchor.DEFINE and routine.kind.takes_param and routine in self._define_owner:
                raise LoadRejected(
                    RejectReason.DEFINE_CONFLICT,
                    f"{export}: {routine} already defined by {self._define_owner[routine]}")

        handle = PluginHandle(plugin_id, permissions, self._load_counter,
                              self.sandbox_root / plugin_id, manifest, len(bytecode))
        self._instantiate(handle, info)
        for export, key in hooks_by_name.items():
            handle.hooks[key] = handle.instance.exports(handle.store)[export]

        self._check_required_fields(handle, info)

        self.plugins[plugin_id] = handle
        for routine, anchor in handle.hooks:
            if anchor == Anchor.DEFINE and routine.kind.takes_param:
                self._define_owner[routine] = plugin_id

        if handle.has_hook(INIT, Anchor.DEFINE):
            try:
                self._invoke_plugin(handle, INIT, [])
            except RoutineAborted as e:
                self._forget(handle)
                raise LoadRejected(RejectReason.BAD_MODULE, f"init failed: {e}") from e
        logger.info(f"Loaded plugin {plugin_id} ({len(bytecode)} octets, "
                    f"{len(handle.hooks)} hooks, phase {handle.phase.value})")
        return handle

    def _instantiate(self, handle: PluginHandle, info) -> None:
        handle.store = new_store(self.fuel_per_call)
        linker = wasmtime.Linker(runtime_engine())
        HostApi(self, handle).link(linker)
        try:
            handle.instance = linker.instantiate(handle.store, info.module)
        except SANDBOX_ERRORS as e:
            raise LoadRejected(RejectReason.BAD_MODULE, f"instantiation failed: {e}") from e
        handle.memory = handle.instance.exports(handle.store)["memory"]
        if "required_fields" in info.function_exports:
            handle.required_fields_func = handle.instance.exports(handle.store)["required_fields"]

    def _check_required_fields(self, handle: PluginHandle, info) -> None:
        func = handle.required_fields_func
        if func is None:
            return
        handle.inputs, handle.outputs = [], []
        handle.store.set_fuel(self.fuel_per_call)
        try:
            func(handle.store)
        except Exception as e:
            raise LoadRejected(RejectReason.BAD_MODULE, f"required_fields trapped: {e}") from e

        supported = self.host.supported_fields()
        for value in handle.outputs:
            if value.kind not in (ValKind.U32, ValKind.U64):
                raise LoadRejected(RejectReason.BAD_MODULE, f"required_fields produced {value.kind.name}")
            try:
                fld = ConnectionField(value.value)
            except ValueError:
                raise LoadRejected(RejectReason.MISSING_FIELD,
                                   f"unknown field id 0x{value.value:x}") from None
            if fld not in supported:
                raise LoadRejected(RejectReason.MISSING_FIELD,
                                   f"{handle.plugin_id} needs {fld.name}, not supported by host")
        handle.outputs = []

    # ------------------------------------------------------------------
    # Queries
    # ------------------------------------------------------------------

    def provides(self, routine: RoutineId, anchor: Anchor = Anchor.DEFINE) -> bool:
        for handle in self.plugins.values():
            if handle.has_hook(routine, anchor) and handle.callable_now(routine):
                return True
        return False

    def define_owner(self, routine: RoutineId) -> Optional[str]:
        return self._define_owner.get(routine)

    def registrations(self) -> Registrations:
        regs = Registrations()
        for handle in self._ordered():
            if handle.enabled:
                regs.frame_types.extend((t, handle.plugin_id) for t in sorted(handle.frame_types))
            if handle.phase in (Phase.ENABLED, Phase.PRE_NEGOTIATION):
                regs.tp_types.extend((t, handle.plugin_id) for t in sorted(handle.tp_types))
        return regs

    def plugin(self, plugin_id: str) -> PluginHandle:
        try:
            return self.plugins[plugin_id]
        except KeyError:
            raise NoSuchPlugin(plugin_id) from None

    def _ordered(self) -> List[PluginHandle]:
        return sorted(self.plugins.values(), key=lambda h: h.load_index)

    def now(self) -> int:
        return self._clock()

    def random_u64(self) -> int:
        return int.from_bytes(self._rng.bytes(8), "little")

    # ------------------------------------------------------------------
    # Dispatch
    # ------------------------------------------------------------------

    def call_routine(self, routine: RoutineId, inputs: Sequence[PluginVal] = ()) -> RoutineResult:
        """
        Run Before hooks, the Define hook, then After hooks for `routine`.

        Raises:
            NotAvailable: No callable Define hook
            RoutineAborted: The Define hook trapped; its plugin is detached
        """
        owner_id = self._define_owner.get(routine)
        owner = self.plugins.get(owner_id) if owner_id else None
        if owner is None or not owner.callable_now(routine):
            raise NotAvailable(f"no plugin defines {routine}")

        inputs = list(inputs)
        self._depth += 1
        try:
            self._run_observers(routine, Anchor.BEFORE, inputs)
            status, outputs = self._invoke_hook(owner, routine, Anchor.DEFINE, inputs)
            self._run_observers(routine, Anchor.AFTER, inputs + outputs)
            result = RoutineResult(outputs, status)
        finally:
            self._depth -= 1
            written = self._caps.revoke_all() if self._depth == 0 else self._caps.snapshot()
        result.written = written
        return result

    def observe(self, routine: RoutineId, anchor: Anchor, inputs: Sequence[PluginVal] = ()) -> None:
        """Run Before or After hooks around a native code path."""
        if anchor == Anchor.DEFINE:
            raise ValueError("observe only runs Before/After hooks")
        if not self.plugins:
            return
        self._depth += 1
        try:
            self._run_observers(routine, anchor, list(inputs))
        finally:
            self._depth -= 1
            if self._depth == 0:
                self._caps.revoke_all()

    def has_observers(self, routine: RoutineId) -> bool:
        return self.provides(routine, Anchor.BEFORE) or self.provides(routine, Anchor.AFTER)

    def _run_observers(self, routine: RoutineId, anchor: Anchor, inputs: List[PluginVal]) -> None:
        for handle in self._ordered():
            if handle.plugin_id not in self.plugins:
                continue
            if handle.has_hook(routine, anchor) and handle.callable_now(routine):
                try:
                    self._invoke_hook(handle, routine, anchor, inputs)
                except RoutineAborted as e:
                    logger.warning(f"{anchor.value} hook of {handle.plugin_id} on {routine} aborted: {e}")

    def _invoke_plugin(self, handle: PluginHandle, routine: RoutineId,
                       inputs: List[PluginVal]) -> RoutineResult:
        """Run one plugin's own Before/Define/After hooks for a per-plugin routine."""
        self._depth += 1
        try:
            if handle.has_hook(routine, Anchor.BEFORE):
                self._invoke_hook(handle, routine, Anchor.BEFORE, inputs)
            status, outputs = self._invoke_hook(handle, routine, Anchor.DEFINE, inputs)
            if handle.has_hook(routine, Anchor.AFTER) and handle.plugin_id in self.plugins:
                self._invoke_hook(handle, routine, Anchor.AFTER, inputs + outputs)
            return RoutineResult(outputs, status)
        finally:
            self._depth -= 1
            if self._depth == 0:
                self._caps.revoke_all()

    def _invoke_hook(self, handle: PluginHandle, routine: RoutineId, anchor: Anchor,
                     inputs: List[PluginVal]) -> Tuple[int, List[PluginVal]]:
        func = handle.hook(routine, anchor)
        if func is None:
            raise NotAvailable(f"{handle.plugin_id} has no {anchor.value} hook for {routine}")
        if handle.poisoned:
            raise NotAvailable(f"{handle.plugin_id} is poisoned")
        if handle.active:
            raise NotAvailable(f"{handle.plugin_id} is already running")

        saved = (handle.inputs, handle.outputs, handle.read_only)
        handle.inputs, handle.outputs = list(inputs), []
        handle.read_only = anchor != Anchor.DEFINE
        handle.active = True
        self._active.append(handle.plugin_id)
        self._seq += 1
        handle.invocations += 1
        try:
            handle.store.set_fuel(self.fuel_per_call)
            status = func(handle.store, self._seq)
            outputs = handle.outputs
        except Exception as e:
            detail = f"{anchor.value} {routine}: {e}"
            self._poison(handle, detail)
            raise RoutineAborted(handle.plugin_id, detail) from e
        finally:
            handle.active = False
            self._active.pop()
            handle.inputs, handle.outputs, handle.read_only = saved
        logger.debug(f"{handle.plugin_id} {anchor.value} {routine} -> {status}")
        return int(status), outputs

    # ------------------------------------------------------------------
    # Lifecycle
    # ------------------------------------------------------------------

    def enable_plugin(self, plugin_id: str) -> None:
        handle = self.plugin(plugin_id)
        if handle.phase == Phase.PRE_NEGOTIATION:
            handle.phase = Phase.ENABLED
            logger.info(f"Plugin {plugin_id} enabled")

    def register_frame_type(self, handle: PluginHandle, frame_type: int) -> None:
        if frame_type not in handle.frame_types:
            handle.frame_types.append(frame_type)

    def register_tp_type(self, handle: PluginHandle, tp_type: int) -> None:
        if tp_type not in handle.tp_types:
            handle.tp_types.append(tp_type)

    def _poison(self, handle: PluginHandle, detail: str) -> None:
        if handle.plugin_id not in self.plugins:
            return
        logger.warning(f"Plugin {handle.plugin_id} poisoned and detached: {detail}")
        handle.phase = Phase.POISONED
        self.poisoned[handle.plugin_id] = detail
        self._forget(handle)

    def _forget(self, handle: PluginHandle) -> None:
        self.plugins.pop(handle.plugin_id, None)
        for routine, owner in list(self._define_owner.items()):
            if owner == handle.plugin_id:
                del self._define_owner[routine]
        handle.timers.clear()
        handle.close_all_files()

    def detach(self, plugin_id: str, reason: str = "contract breach") -> None:
        """Poison a plugin from the host side (e.g. WriteFrame length mismatch)."""
        self._poison(self.plugin(plugin_id), reason)

    def close(self) -> None:
        for handle in list(self.plugins.values()):
            handle.close_all_files()

    # ------------------------------------------------------------------
    # Plugin control
    # ------------------------------------------------------------------

    def plugin_control(self, plugin_id: str, op: int, args: Sequence[PluginVal] = (),
                       caller: Optional[str] = None) -> RoutineResult:
        """
        Call the PluginControl hook of `plugin_id` with U64(op) followed by `args`.

        Raises:
            NotAvailable: Target missing, not enabled, without the hook, already
                running, or nesting too deep
        """
        handle = self.plugins.get(plugin_id)
        if handle is None or not handle.enabled or not handle.has_hook(PLUGIN_CONTROL, Anchor.DEFINE):
            raise NotAvailable(f"plugin_control unavailable on {plugin_id}")
        if caller == plugin_id or plugin_id in self._active:
            raise NotAvailable(f"{plugin_id} cannot be re-entered")
        if len(self._active) >= self.max_control_depth:
            raise NotAvailable(f"plugin_control nesting deeper than {self.max_control_depth}")
        return self._invoke_plugin(handle, PLUGIN_CONTROL, [PluginVal.u64(op)] + list(args))

    # ------------------------------------------------------------------
    # Timers
    # ------------------------------------------------------------------

    def set_timer(self, plugin_id: str, deadline: int, callback_tag: int) -> int:
        handle = self.plugin(plugin_id)
        if not handle.permissions.timer_api:
            raise PluginPermissionError(f"{plugin_id} lacks TimerApi")
        self._timer_counter += 1
        handle.timers[self._timer_counter] = TimerRegistration(self._timer_counter, deadline, callback_tag)
        return self._timer_counter

    def cancel_timer(self, plugin_id: str, timer_id: int) -> None:
        handle = self.plugin(plugin_id)
        if not handle.permissions.timer_api:
            raise PluginPermissionError(f"{plugin_id} lacks TimerApi")
        del handle.timers[timer_id]

    def next_deadline(self) -> Optional[int]:
        deadlines = [t.deadline for h in self.plugins.values() for t in h.timers.values()]
        return min(deadlines) if deadlines else None

    def fire_due_timers(self, now: int) -> int:
        """Invoke OnPluginTimeout for every timer due at `now`; returns the count fired."""
        fired = 0
        for _ in range(MAX_TIMER_ROUNDS):
            due = sorted(
                ((t.deadline, t.timer_id, h) for h in self._ordered() for t in h.timers.values()
                 if t.deadline <= now),
                key=lambda item: (item[0], item[1]))
            if not due:
                return fired
            for _, timer_id, handle in due:
                timer = handle.timers.pop(timer_id, None)
                if timer is None or handle.plugin_id not in self.plugins:
                    continue
                if not handle.callable_now(ON_PLUGIN_TIMEOUT) or \
                        not handle.has_hook(ON_PLUGIN_TIMEOUT, Anchor.DEFINE):
                    logger.debug(f"Dropping timer {timer_id} of {handle.plugin_id} ({handle.phase.value})")
                    continue
                fired += 1
                try:
                    self._invoke_plugin(handle, ON_PLUGIN_TIMEOUT, [PluginVal.u64(timer.callback_tag)])
                except RoutineAborted as e:
                    logger.warning(f"Timer callback aborted: {e}")
        logger.warning(f"Timers still due after {MAX_TIMER_ROUNDS} rounds at t={now}")
        return fired

    # ------------------------------------------------------------------
    # Byte capabilities
    # ------------------------------------------------------------------

    def bytes_expose(self, buffer: bytearray, max_read: int, max_write: int) -> BytesCapability:
        return self._caps.expose(buffer, max_read, max_write)

    def bytes_read(self, tag: int, offset: int, length: int) -> bytes:
        return self._caps.read(tag, offset, length)

    def bytes_write(self, tag: int, offset: int, data: bytes) -> int:
        return self._caps.write(tag, offset, data)

    def bytes_written(self, tag: int) -> int:
        return self._caps.written(tag)

    def live_capabilities(self) -> int:
        return len(self._caps)
