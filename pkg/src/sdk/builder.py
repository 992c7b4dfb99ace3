"""
Plugin builder: turns hook bodies into a cq-abi-1 WebAssembly module.

Authors write each hook as a WAT instruction sequence leaving the i64 status on
the stack, list it against a RoutineId and anchor, and the builder emits the
correctly named export, the runtime helpers, the required_fields export and the
embedded manifest.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import wasmtime

from src.common.abi import ABI_NAMESPACE, DATA_BASE, HEAP_BASE, LAYOUT, MANIFEST_SECTION, MEMORY_PAGES
from src.common.export_names import render_export_name
from src.common.fields import ConnectionField
from src.common.routines import Anchor, RoutineId
from src.common.values import ValKind
from src.sdk.binary import append_custom_section, read_manifest
from src.sdk.runtime import import_declarations, runtime_wat

logger = logging.getLogger(__name__)

# PluginVal tags available to hook bodies as {T_BOOL}, {T_U64}, ...
TAGS = {f"T_{kind.name}": int(kind) for kind in ValKind}


@dataclass
class PluginManifest:
    name: str
    required_fields: List[str] = field(default_factory=list)
    frame_types: List[int] = field(default_factory=list)
    tp_types: List[int] = field(default_factory=list)
    needs_negotiation: bool = False
    permissions: List[str] = field(default_factory=list)
    exports: List[str] = field(default_factory=list)
    abi: str = ABI_NAMESPACE

    def to_json(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True).encode("utf-8")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PluginManifest":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _wat_string(octets: bytes) -> str:
    return '"' + "".join(f"\\{b:02x}" for b in octets) + '"'


class PluginBuilder:
    """
    Collects hooks, helper functions, globals and static data for one plugin.

    Hook bodies and helper functions may use `{label}` / `{label_len}` for data
    registered with `data()`, the memory layout names ({IN_BUF}, {SCRATCH}, ...)
    and PluginVal tags ({T_U64}, {T_QUIC_FRAME}, ...).

    Example:
        builder = PluginBuilder("counter")
        builder.global_i64("count")
        builder.hook(INIT, "(global.set $count (i64.const 0)) (i64.const 0)")
        binary = builder.build()
    """

    def __init__(self, name: str, needs_negotiation: bool = False,
                 permissions: Iterable[str] = ()):
        self.manifest = PluginManifest(name, needs_negotiation=needs_negotiation,
                                       permissions=list(permissions))
        self._required: List[ConnectionField] = []
        self._hooks: List[Tuple[str, str, str]] = []
        self._functions: List[str] = []
        self._globals: List[str] = []
        self._data: List[Tuple[int, bytes]] = []
        self._symbols: Dict[str, int] = {}
        self._data_cursor = DATA_BASE

    # -- declarations ---------------------------------------------------------

    def require(self, *fields: ConnectionField) -> "PluginBuilder":
        for fld in fields:
            if fld not in self._required:
                self._required.append(fld)
        return self

    def declare_frame(self, frame_type: int) -> "PluginBuilder":
        self.manifest.frame_types.append(frame_type)
        return self

    def declare_tp(self, tp_type: int) -> "PluginBuilder":
        self.manifest.tp_types.append(tp_type)
        return self

    def data(self, label: str, octets: bytes) -> Tuple[int, int]:
        """Place static octets in linear memory; returns (address, length)."""
        if label in self._symbols:
            raise ValueError(f"data label {label!r} already defined")
        address = self._data_cursor
        if address + len(octets) > HEAP_BASE:
            raise ValueError("static data area exhausted")
        self._data.append((address, octets))
        self._symbols[label] = address
        self._symbols[f"{label}_len"] = len(octets)
        self._data_cursor = (address + len(octets) + 7) & ~7
        return address, len(octets)

    def reserve(self, label: str, size: int) -> int:
        """Reserve zeroed working space in the static area; returns its address."""
        address, _ = self.data(label, b"")
        self._data.pop()
        self._data_cursor = (address + size + 7) & ~7
        if self._data_cursor > HEAP_BASE:
            raise ValueError("static data area exhausted")
        self._symbols[f"{label}_len"] = size
        return address

    def constant(self, name: str, value: int) -> "PluginBuilder":
        """Make `{name}` available to hook bodies and helper functions."""
        if name in self._symbols:
            raise ValueError(f"symbol {name!r} already defined")
        self._symbols[name] = value
        return self

    def global_i64(self, name: str, initial: int = 0) -> "PluginBuilder":
        self._globals.append(f"  (global ${name} (mut i64) (i64.const {initial}))")
        return self

    def global_i32(self, name: str, initial: int = 0) -> "PluginBuilder":
        self._globals.append(f"  (global ${name} (mut i32) (i32.const {initial}))")
        return self

    def function(self, wat: str) -> "PluginBuilder":
        """Add a private helper function written in WAT."""
        self._functions.append(wat)
        return self

    def hook(self, routine: RoutineId, body: str, anchor: Anchor = Anchor.DEFINE,
             locals_: str = "") -> "PluginBuilder":
        """
        Attach a hook. `body` runs with `$seq` (i64) in scope and must leave the
        i64 status on the stack.
        """
        export = render_export_name(routine, anchor)
        if any(name == export for name, _, _ in self._hooks):
            raise ValueError(f"hook {export} defined twice")
        self._hooks.append((export, locals_, body))
        return self

    # -- output ---------------------------------------------------------------

    def _substitutions(self) -> Dict[str, int]:
        return {**LAYOUT, **TAGS, **self._symbols}

    def _required_fields_func(self) -> str:
        calls = "\n".join(
            f"    (drop (call $cq_save_scalar (i32.const {int(ValKind.U32)}) (i64.const {int(fld)})))"
            for fld in self._required)
        return f'  (func (export "required_fields") (result i64)\n{calls}\n    (i64.const 0))'

    def wat(self) -> str:
        subs = self._substitutions()
        parts = ["(module", import_declarations(),
                 f'  (memory (export "memory") {MEMORY_PAGES})',
                 runtime_wat()]
        parts.extend(self._globals)
        for address, octets in self._data:
            parts.append(f"  (data (i32.const {address}) {_wat_string(octets)})")
        for wat in self._functions:
            parts.append(wat.format(**subs))
        parts.append(self._required_fields_func())
        for export, locals_, body in self._hooks:
            parts.append(
                f'  (func $hook_{export} (export "{export}") (param $seq i64) (result i64)'
                f"\n    {locals_}\n    {body.format(**subs)})")
        parts.append(")")
        return "\n".join(parts)

    def build(self) -> bytes:
        """
        Assemble the module and embed the manifest.

        Raises:
            wasmtime.WasmtimeError: The generated text does not assemble
        """
        self.manifest.required_fields = [fld.name for fld in self._required]
        self.manifest.exports = ["required_fields"] + [name for name, _, _ in self._hooks]
        binary = wasmtime.wat2wasm(self.wat())
        binary = append_custom_section(bytes(binary), MANIFEST_SECTION, self.manifest.to_json())
        logger.debug(f"Built plugin {self.manifest.name}: {len(binary)} octets, "
                     f"{len(self._hooks)} hooks")
        return binary


def manifest_of(binary: bytes) -> Optional[PluginManifest]:
    data = read_manifest(binary)
    return PluginManifest.from_dict(data) if data else None
