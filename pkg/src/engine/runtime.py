"""
Thin layer over the wasmtime runtime: shared compiler, module inspection, instantiation.
"""

import functools
import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import wasmtime

from src.common.abi import ABI_NAMESPACE, HOOK_PARAMS, HOOK_RESULTS, IMPORTS
from src.common.errors import LoadRejected, RejectReason

logger = logging.getLogger(__name__)

# Raised by wasmtime for traps, fuel exhaustion and link errors
SANDBOX_ERRORS = (wasmtime.Trap, wasmtime.WasmtimeError)


@functools.lru_cache(maxsize=1)
def runtime_engine() -> wasmtime.Engine:
    """Process-wide compiler with fuel metering on."""
    cfg = wasmtime.Config()
    cfg.consume_fuel = True
    return wasmtime.Engine(cfg)


def val_type(name: str) -> wasmtime.ValType:
    return wasmtime.ValType.i32() if name == "i32" else wasmtime.ValType.i64()


def func_type(params, results) -> wasmtime.FuncType:
    return wasmtime.FuncType([val_type(p) for p in params], [val_type(r) for r in results])


def _signature(ty: wasmtime.FuncType) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    return tuple(str(p) for p in ty.params), tuple(str(r) for r in ty.results)


@dataclass
class ModuleInfo:
    module: wasmtime.Module
    function_exports: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]]
    has_memory: bool
    imports: List[str]


def compile_module(bytecode: bytes) -> ModuleInfo:
    """
    Compile and inspect a plugin module.

    Raises:
        LoadRejected(BAD_MODULE): malformed bytecode, foreign imports, no exported memory
    """
    try:
        module = wasmtime.Module(runtime_engine(), bytecode)
    except SANDBOX_ERRORS as e:
        raise LoadRejected(RejectReason.BAD_MODULE, f"compile failed: {e}") from e
    except (TypeError, ValueError) as e:
        raise LoadRejected(RejectReason.BAD_MODULE, f"not a module: {e}") from e

    imports = []
    for imp in module.imports:
        if imp.module != ABI_NAMESPACE or imp.name not in IMPORTS:
            raise LoadRejected(RejectReason.BAD_MODULE,
                               f"unsupported import {imp.module}.{imp.name}")
        if not isinstance(imp.type, wasmtime.FuncType) or _signature(imp.type) != IMPORTS[imp.name]:
            raise LoadRejected(RejectReason.BAD_MODULE, f"import {imp.name} has the wrong signature")
        imports.append(imp.name)

    function_exports = {}
    has_memory = False
    for exp in module.exports:
        if isinstance(exp.type, wasmtime.FuncType):
            function_exports[exp.name] = _signature(exp.type)
        elif isinstance(exp.type, wasmtime.MemoryType) and exp.name == "memory":
            has_memory = True
    if not has_memory:
        raise LoadRejected(RejectReason.BAD_MODULE, "module does not export its memory")
    return ModuleInfo(module, function_exports, has_memory, imports)


def is_hook_signature(signature) -> bool:
    return signature == (HOOK_PARAMS, HOOK_RESULTS)


def new_store(fuel: int) -> wasmtime.Store:
    store = wasmtime.Store(runtime_engine())
    store.set_fuel(fuel)
    return store
