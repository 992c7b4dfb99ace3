"""
Loaded plugin state: sandbox instance, hook table, registrations, timers.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from src.common.routines import (
    PRE_NEGOTIATION_KINDS,
    Anchor,
    RoutineId,
)
from src.common.values import PluginVal
from src.engine.permissions import PermissionSet

logger = logging.getLogger(__name__)

MAX_OPEN_FILES = 16


class Phase(Enum):
    PRE_NEGOTIATION = "PreNegotiation"
    ENABLED = "Enabled"
    POISONED = "Poisoned"


@dataclass(frozen=True)
class TimerRegistration:
    timer_id: int
    deadline: int
    callback_tag: int


class PluginHandle:
    """
    One plugin instance attached to one connection.

    The wasm store, instance and memory are private to the handle; the host only
    talks to them through the engine.
    """

    def __init__(self, plugin_id: str, permissions: PermissionSet, load_index: int,
                 sandbox_dir: Path, manifest: Optional[Dict[str, Any]] = None,
                 binary_size: int = 0):
        self.plugin_id = plugin_id
        self.permissions = permissions
        self.load_index = load_index
        self.sandbox_dir = sandbox_dir
        self.manifest = manifest or {}
        self.binary_size = binary_size

        self.store = None
        self.instance = None
        self.memory = None
        self.hooks: Dict[Tuple[RoutineId, Anchor], Any] = {}
        self.required_fields_func = None

        self.phase = Phase.PRE_NEGOTIATION
        self.frame_types: List[int] = []
        self.tp_types: List[int] = []
        self.timers: Dict[int, TimerRegistration] = {}
        self.files: Dict[int, Any] = {}
        self._next_fd = 3

        # io slots of the invocation currently running in this plugin
        self.inputs: List[PluginVal] = []
        self.outputs: List[PluginVal] = []
        self.read_only = False
        self.active = False
        self.invocations = 0

    @property
    def enabled(self) -> bool:
        return self.phase == Phase.ENABLED

    @property
    def poisoned(self) -> bool:
        return self.phase == Phase.POISONED

    def callable_now(self, routine: RoutineId) -> bool:
        """Phase gating: PreNegotiation only reaches negotiation routines."""
        if self.phase == Phase.ENABLED:
            return True
        if self.phase == Phase.PRE_NEGOTIATION:
            return routine.kind in PRE_NEGOTIATION_KINDS
        return False

    def hook(self, routine: RoutineId, anchor: Anchor):
        return self.hooks.get((routine, anchor))

    def has_hook(self, routine: RoutineId, anchor: Anchor) -> bool:
        return (routine, anchor) in self.hooks

    def open_file(self, handle) -> int:
        if len(self.files) >= MAX_OPEN_FILES:
            raise OSError(f"plugin {self.plugin_id} has too many open files")
        fd = self._next_fd
        self._next_fd += 1
        self.files[fd] = handle
        return fd

    def close_all_files(self) -> None:
        for fd, handle in list(self.files.items()):
            try:
                handle.close()
            except OSError as e:
                logger.debug(f"Closing fd {fd} of {self.plugin_id} failed: {e}")
        self.files.clear()

    def summary(self) -> Dict[str, Any]:
        return {
            "plugin_id": self.plugin_id,
            "phase": self.phase.value,
            "permissions": self.permissions.names(),
            "frame_types": [hex(t) for t in self.frame_types],
            "tp_types": [hex(t) for t in self.tp_types],
            "hooks": sorted(f"{anchor.value}:{routine}" for routine, anchor in self.hooks),
            "binary_size": self.binary_size,
        }

    def __repr__(self) -> str:
        return f"PluginHandle({self.plugin_id!r}, phase={self.phase.value})"
