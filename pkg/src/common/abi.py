"""
The cq-abi-1 import contract between plugin modules and hosts.

Every plugin imports from the single namespace ABI_NAMESPACE; a host links
exactly these functions. Pointers and lengths are i32 offsets into the plugin's
own linear memory. Calls return a StatusCode (negative) on failure.
"""

from typing import Dict, Tuple

ABI_NAMESPACE = "cq-abi-1"
MANIFEST_SECTION = "cq-manifest"

# Signature of every hook export: invocation sequence number in, status out
HOOK_PARAMS = ("i64",)
HOOK_RESULTS = ("i64",)

# name -> (params, results)
IMPORTS: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    # Parameter communication
    "get_input": (("i32", "i32", "i32"), ("i32",)),          # index, ptr, cap -> encoded len
    "input_count": ((), ("i32",)),
    "save_output": (("i32", "i32"), ("i32",)),               # ptr, len
    # Connection state
    "get_field": (("i32", "i32", "i32"), ("i32",)),          # field, ptr, cap -> encoded len
    "set_field": (("i32", "i32", "i32"), ("i32",)),          # field, ptr, len
    # Raw bytes through capabilities
    "bytes_read": (("i64", "i64", "i32", "i32"), ("i32",)),  # tag, offset, ptr, len -> read
    "bytes_write": (("i64", "i64", "i32", "i32"), ("i32",)),  # tag, offset, ptr, len -> written
    # Persistent files in the plugin sandbox
    "file_open": (("i32", "i32", "i32"), ("i32",)),          # path ptr, path len, mode -> fd
    "file_read": (("i32", "i32", "i32"), ("i32",)),          # fd, ptr, len -> read
    "file_write": (("i32", "i32", "i32"), ("i32",)),         # fd, ptr, len -> written
    "file_close": (("i32",), ("i32",)),
    # New types and activation
    "register_frame_type": (("i64",), ("i32",)),
    "register_tp_type": (("i64",), ("i32",)),
    "enable_plugin": ((), ("i32",)),
    # Time
    "set_timer": (("i64", "i64"), ("i64",)),                 # deadline us, callback tag -> timer id
    "cancel_timer": (("i64",), ("i32",)),
    "current_time": ((), ("i64",)),
    # Cross-plugin control: name ptr, name len, op, args ptr, args len -> status
    "plugin_control": (("i32", "i32", "i64", "i32", "i32"), ("i64",)),
    # Misc
    "log_line": (("i32", "i32"), ("i32",)),
    "random_u64": ((), ("i64",)),
}

# file_open modes
FILE_READ = 0
FILE_WRITE = 1
FILE_APPEND = 2

# Linear memory layout used by the SDK runtime (not enforced by hosts)
IN_BUF = 0x0400
IN_CAP = 0x1100
OUT_BUF = 0x1500
OUT_CAP = 0x1100
SCRATCH = 0x2600
SCRATCH_CAP = 0x0200
FIELD_BUF = 0x2800
FIELD_CAP = 0x0100
FRAME_BUF = 0x2900
FRAME_CAP = 0x1700
DATA_BASE = 0x4000
HEAP_BASE = 0x8000
MEMORY_PAGES = 2

LAYOUT = {
    "IN_BUF": IN_BUF,
    "IN_CAP": IN_CAP,
    "OUT_BUF": OUT_BUF,
    "OUT_CAP": OUT_CAP,
    "SCRATCH": SCRATCH,
    "SCRATCH_CAP": SCRATCH_CAP,
    "FIELD_BUF": FIELD_BUF,
    "FIELD_CAP": FIELD_CAP,
    "FRAME_BUF": FRAME_BUF,
    "FRAME_CAP": FRAME_CAP,
    "DATA_BASE": DATA_BASE,
    "HEAP_BASE": HEAP_BASE,
}
