"""
ACK logger: appends one line per ACK frame written or processed to a sandbox file.

Hooks only the After anchors of the native ACK routines, so the connection
behaves exactly as without the plugin.
"""

from src.common.routines import INIT, Anchor, RoutineId, RoutineKind
from src.config import config
from src.sdk import PluginBuilder

NAME = "ack_logger"
ACK_FRAME = 0x02

LOG_ACK_WAT = r"""
  (func $log_ack (param $prefix i32) (param $prefix_len i32)
    (local $n i32)
    (if (i32.lt_s (call $cq_fetch_input (i32.const 0)) (i32.const 0))
      (then (return)))
    (if (i32.ne (i32.load8_u offset=1 (i32.const {IN_BUF})) (i32.const 2))
      (then (return)))
    (memory.copy (i32.const {line}) (local.get $prefix) (local.get $prefix_len))
    (local.set $n (i32.add (local.get $prefix_len)
      (call $cq_fmt_u64 (i32.add (i32.const {line}) (local.get $prefix_len))
        (i64.load offset=2 (i32.const {IN_BUF})))))
    (i32.store8 (i32.add (i32.const {line}) (local.get $n)) (i32.const 10))
    ;; file errors are ignored: logging never affects the transport
    (drop (call $cq_file_put (i32.const {log_path}) (i32.const {log_path_len}) (i32.const 2)
      (i32.const {line}) (i32.add (local.get $n) (i32.const 1)))))
"""


def build() -> bytes:
    builder = PluginBuilder(NAME, permissions=["file"])
    builder.data("log_path", config.plugins['ack_logger']['log_file'].encode())
    builder.data("rx_prefix", b"rx ACK largest=")
    builder.data("tx_prefix", b"tx ACK largest=")
    builder.reserve("line", 64)
    builder.function(LOG_ACK_WAT)

    builder.hook(INIT, "(drop (call $enable_plugin)) (i64.const 0)")
    builder.hook(RoutineId(RoutineKind.PROCESS_FRAME, ACK_FRAME),
                 "(call $log_ack (i32.const {rx_prefix}) (i32.const {rx_prefix_len})) (i64.const 0)",
                 anchor=Anchor.AFTER)
    builder.hook(RoutineId(RoutineKind.WRITE_FRAME, ACK_FRAME),
                 "(call $log_ack (i32.const {tx_prefix}) (i32.const {tx_prefix_len})) (i64.const 0)",
                 anchor=Anchor.AFTER)
    return builder.build()
