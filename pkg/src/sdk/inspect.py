"""
Static report on a plugin binary: hook exports, registrations, required fields.

Everything here runs without instantiating the plugin, so it is safe to point
at untrusted files.
"""

import logging
from typing import Any, Dict, List

from src.common.errors import LoadRejected, RejectReason
from src.common.export_names import RESERVED_EXPORTS, parse_export_name
from src.engine.runtime import compile_module, is_hook_signature
from src.sdk.builder import manifest_of

logger = logging.getLogger(__name__)


def inspect_plugin(binary: bytes) -> Dict[str, Any]:
    """
    Map every export to its (RoutineId, Anchor) and summarise the manifest.

    Args:
        binary: WebAssembly module bytes

    Returns:
        Dict with name, size, exports, frame_types, tp_types, required_fields,
        permissions, needs_negotiation and manifest_mismatch (exports the
        manifest lists but the module lacks, or the reverse)

    Raises:
        BadExportName: An export does not follow the naming convention
        LoadRejected(BAD_MODULE): Malformed module or a hook with the wrong signature
    """
    info = compile_module(binary)
    exports: List[Dict[str, str]] = []
    for export, signature in sorted(info.function_exports.items()):
        if export in RESERVED_EXPORTS:
            continue
        routine, anchor = parse_export_name(export)
        if not is_hook_signature(signature):
            raise LoadRejected(RejectReason.BAD_MODULE, f"hook {export} must be (i64) -> i64")
        exports.append({"export": export, "routine": str(routine), "anchor": anchor.name})

    manifest = manifest_of(binary)
    hook_names = {e["export"] for e in exports}
    mismatch: List[str] = []
    if manifest is None:
        logger.warning("Plugin carries no manifest")
    elif manifest.exports:
        listed = set(manifest.exports) - RESERVED_EXPORTS
        mismatch = sorted((listed - hook_names) | (hook_names - listed))

    return {
        "name": manifest.name if manifest else None,
        "size": len(binary),
        "exports": exports,
        "frame_types": [f"0x{t:x}" for t in (manifest.frame_types if manifest else [])],
        "tp_types": [f"0x{t:x}" for t in (manifest.tp_types if manifest else [])],
        "required_fields": list(manifest.required_fields) if manifest else [],
        "permissions": list(manifest.permissions) if manifest else [],
        "needs_negotiation": bool(manifest and manifest.needs_negotiation),
        "imports": sorted(info.imports),
        "manifest_mismatch": mismatch,
    }
