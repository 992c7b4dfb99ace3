"""
Privacy padding: pads every packet to the MTU and spaces packets by a random delay.

The plugin owns the PADDING routines. PrepareFrame hands the host a fill
request while sending is allowed; once a packet carrying it is committed the
plugin holds further packets back (HALT_SENDING) until a timer drawn from
Uniform(0, 2 * base) fires.

PluginControl ops:
    1  toggle padding and delays, outputs Bool(new state)
    2  set base delay (U64 microseconds)
    3  query state, outputs Bool
"""

from src.common.errors import StatusCode
from src.common.routines import INIT, ON_PLUGIN_TIMEOUT, PLUGIN_CONTROL, RoutineId, RoutineKind
from src.config import config
from src.sdk import PluginBuilder

NAME = "privacy_padding"
PADDING = 0x00

OP_TOGGLE = 1
OP_SET_BASE = 2
OP_STATE = 3

CONTROL_WAT = """
    (local.set $op (call $cq_input_u64 (i32.const 0)))
    (if (i64.eq (local.get $op) (i64.const 1))
      (then
        (global.set $active (i32.eqz (global.get $active)))
        (global.set $allowed (i32.const 1))
        (if (global.get $active)
          (then (call $cq_log (i32.const {msg_on}) (i32.const {msg_on_len})))
          (else (call $cq_log (i32.const {msg_off}) (i32.const {msg_off_len}))))
        (drop (call $cq_save_bool (global.get $active)))
        (return (i64.const 0))))
    (if (i64.eq (local.get $op) (i64.const 2))
      (then
        (global.set $base (call $cq_input_u64 (i32.const 1)))
        (return (i64.const 0))))
    (if (i64.eq (local.get $op) (i64.const 3))
      (then
        (drop (call $cq_save_bool (global.get $active)))
        (return (i64.const 0))))
    (i64.const 1)
"""

RESERVED_WAT = """
    (global.set $allowed (i32.const 0))
    (local.set $delay (call $cq_random_below
      (i64.add (i64.shl (global.get $base) (i64.const 1)) (i64.const 1))))
    ;; without a timer nothing would ever re-open sending
    (if (i64.lt_s (call $cq_timer_after (local.get $delay) (i64.const 1)) (i64.const 0))
      (then (global.set $allowed (i32.const 1))))
    (i64.const 0)
"""


def build(base_delay_us: int = None) -> bytes:
    if base_delay_us is None:
        base_delay_us = config.plugins['privacy_padding']['base_delay_us']

    builder = PluginBuilder(NAME, permissions=["register", "timer"])
    builder.global_i32("active", 1)
    builder.global_i32("allowed", 1)
    builder.global_i64("base", base_delay_us)
    builder.data("msg_on", b"padding on")
    builder.data("msg_off", b"padding off")
    builder.constant("HALT", int(StatusCode.HALT_SENDING))

    builder.hook(INIT, """
    (drop (call $register_frame_type (i64.const 0)))
    (drop (call $enable_plugin))
    (i64.const 0)""")
    builder.hook(RoutineId(RoutineKind.SHOULD_SEND_FRAME, PADDING),
                 "(drop (call $cq_save_bool (global.get $active))) (i64.const 0)")
    builder.hook(RoutineId(RoutineKind.PREPARE_FRAME, PADDING), """
    (if (i32.eqz (global.get $allowed))
      (then (return (i64.const {HALT}))))
    ;; length 0: fill whatever room the packet has left
    (drop (call $cq_save_frame_u64 (i32.const 0) (i64.const 0)))
    (i64.const 0)""")
    builder.hook(RoutineId(RoutineKind.ON_FRAME_RESERVED, PADDING), RESERVED_WAT,
                 locals_="(local $delay i64)")
    builder.hook(ON_PLUGIN_TIMEOUT, "(global.set $allowed (i32.const 1)) (i64.const 0)")
    builder.hook(PLUGIN_CONTROL, CONTROL_WAT, locals_="(local $op i64)")
    return builder.build()
