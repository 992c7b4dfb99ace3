"""
Export-name convention mapping plugin function names to (RoutineId, Anchor).

    [before_|after_]<routine>[_<hex param>]

    write_frame_aa         -> WriteFrame(0xaa), Define
    after_process_frame_2  -> ProcessFrame(0x2), After
    init                   -> Init, Define

The hex suffix is lower-case without leading zeros, so rendering a parsed name
gives back the original string.
"""

import re
from typing import Tuple

from src.common.errors import BadExportName
from src.common.routines import Anchor, RoutineId, RoutineKind
from src.common.varint import VARINT_MAX

# Module exports that are not hooks
RESERVED_EXPORTS = frozenset({"memory", "required_fields"})

_HEX_RE = re.compile(r"^(0|[1-9a-f][0-9a-f]{0,15})$")
_PREFIXES = (("before_", Anchor.BEFORE), ("after_", Anchor.AFTER))


def parse_export_name(name: str) -> Tuple[RoutineId, Anchor]:
    """
    Parse an exported function name.

    Args:
        name: Export identifier from a plugin module

    Returns:
        tuple: (RoutineId, Anchor)

    Raises:
        BadExportName: Unknown routine, malformed or missing suffix
    """
    anchor = Anchor.DEFINE
    rest = name
    for prefix, prefix_anchor in _PREFIXES:
        if name.startswith(prefix):
            anchor = prefix_anchor
            rest = name[len(prefix):]
            break

    kind = RoutineKind.from_stem(rest)
    if kind is not None:
        if kind.takes_param:
            raise BadExportName(f"{name}: {kind.name} needs a _<hex> type suffix")
        return RoutineId(kind), anchor

    stem, sep, suffix = rest.rpartition("_")
    kind = RoutineKind.from_stem(stem) if sep else None
    if kind is None:
        raise BadExportName(f"{name}: unknown routine '{rest}'")
    if not kind.takes_param:
        raise BadExportName(f"{name}: {kind.name} takes no type suffix")
    if not _HEX_RE.match(suffix):
        raise BadExportName(f"{name}: malformed hex suffix '{suffix}'")
    param = int(suffix, 16)
    if param > VARINT_MAX:
        raise BadExportName(f"{name}: type 0x{suffix} exceeds 62 bits")
    return RoutineId(kind, param), anchor


def render_export_name(routine: RoutineId, anchor: Anchor = Anchor.DEFINE) -> str:
    """Inverse of parse_export_name."""
    name = routine.kind.value
    if routine.param is not None:
        name = f"{name}_{routine.param:x}"
    if anchor != Anchor.DEFINE:
        name = f"{anchor.value}_{name}"
    return name
