"""
DUMMY frame: a field-less extension frame sent once per perceived round trip.

A new DUMMY is prepared only when none is in flight; NotifyFrame (acknowledged
or lost) clears the in-flight flag. Every `toggle_every` received DUMMY frames
the plugin asks privacy_padding to toggle through PluginControl. When that
plugin is absent the call returns NOT_AVAILABLE, which is ignored.
"""

from src.common.routines import INIT, RoutineId, RoutineKind
from src.config import config
from src.sdk import PluginBuilder

NAME = "dummy_frame"
TOGGLE_TARGET = b"privacy_padding"
TOGGLE_OP = 1

PROCESS_WAT = """
    (global.set $received (i64.add (global.get $received) (i64.const 1)))
    (if (i64.eqz (i64.rem_u (global.get $received) (i64.const {TOGGLE_EVERY})))
      (then
        (drop (call $cq_control (i32.const {target}) (i32.const {target_len}) (i64.const {TOGGLE_OP})))))
    (i64.const 0)
"""

WRITE_WAT = """
    (local.set $tag (call $cq_input_cap (i32.const 1)))
    (if (i64.lt_s (local.get $tag) (i64.const 0))
      (then (return (i64.const 1))))
    (call $cq_cap_put (local.get $tag)
      (call $cq_varint_write (i32.const {SCRATCH}) (i64.const {DUMMY_FRAME})))
"""

PARSE_WAT = """
    (local.set $tag (call $cq_input_cap (i32.const 0)))
    (if (i64.lt_s (local.get $tag) (i64.const 0))
      (then (return (i64.const 1))))
    (local.set $n (i32.wrap_i64
      (select (global.get $cq_cap_read) (i64.const 8) (i64.lt_u (global.get $cq_cap_read) (i64.const 8)))))
    (if (i32.lt_s (call $bytes_read (local.get $tag) (i64.const 0) (i32.const {SCRATCH}) (local.get $n))
                  (i32.const 0))
      (then (return (i64.const 1))))
    (drop (call $cq_varint_read (i32.const {SCRATCH})))
    (if (i32.gt_u (global.get $cq_varint_used) (local.get $n))
      (then (return (i64.const 1))))
    (call $cq_frame_begin (i64.const {DUMMY_FRAME}))
    (drop (call $cq_frame_save))
    (drop (call $cq_save_scalar (i32.const {T_USIZE}) (i64.extend_i32_u (global.get $cq_varint_used))))
    (i64.const 0)
"""


def build(frame_type: int = None, tp_type: int = None, toggle_every: int = None) -> bytes:
    settings = config.plugins['dummy_frame']
    frame_type = settings['frame_type'] if frame_type is None else frame_type
    tp_type = settings['tp_type'] if tp_type is None else tp_type
    toggle_every = settings['toggle_every'] if toggle_every is None else toggle_every

    builder = PluginBuilder(NAME, needs_negotiation=True, permissions=["register", "bytes", "control"])
    builder.declare_frame(frame_type).declare_tp(tp_type)
    builder.constant("DUMMY_FRAME", frame_type)
    builder.constant("DUMMY_TP", tp_type)
    builder.constant("TOGGLE_EVERY", toggle_every)
    builder.constant("TOGGLE_OP", TOGGLE_OP)
    builder.data("target", TOGGLE_TARGET)
    builder.global_i32("in_flight")
    builder.global_i64("received")

    def routine(kind: RoutineKind) -> RoutineId:
        return RoutineId(kind, frame_type)

    builder.hook(INIT, """
    (drop (call $register_tp_type (i64.const {DUMMY_TP})))
    (drop (call $register_frame_type (i64.const {DUMMY_FRAME})))
    (i64.const 0)""")
    builder.hook(RoutineId(RoutineKind.WRITE_TRANSPORT_PARAMETER, tp_type),
                 "(call $cq_write_tp_flag (i64.const {DUMMY_TP}))")
    builder.hook(RoutineId(RoutineKind.DECODE_TRANSPORT_PARAMETER, tp_type),
                 "(drop (call $enable_plugin)) (i64.const 0)")
    builder.hook(routine(RoutineKind.SHOULD_SEND_FRAME),
                 "(drop (call $cq_save_bool (i32.eqz (global.get $in_flight)))) (i64.const 0)")
    builder.hook(routine(RoutineKind.PREPARE_FRAME), """
    (call $cq_frame_begin (i64.const {DUMMY_FRAME}))
    (drop (call $cq_frame_save))
    (i64.const 0)""")
    builder.hook(routine(RoutineKind.FRAME_WIRE_LEN), """
    (drop (call $cq_save_scalar (i32.const {T_USIZE})
      (i64.extend_i32_u (call $cq_varint_len (i64.const {DUMMY_FRAME})))))
    (i64.const 0)""")
    builder.hook(routine(RoutineKind.WRITE_FRAME), WRITE_WAT, locals_="(local $tag i64)")
    builder.hook(routine(RoutineKind.ON_FRAME_RESERVED),
                 "(global.set $in_flight (i32.const 1)) (i64.const 0)")
    # acknowledged or lost: either way the round trip is over
    builder.hook(routine(RoutineKind.NOTIFY_FRAME),
                 "(global.set $in_flight (i32.const 0)) (i64.const 0)")
    builder.hook(routine(RoutineKind.PARSE_FRAME), PARSE_WAT, locals_="(local $tag i64) (local $n i32)")
    builder.hook(routine(RoutineKind.PROCESS_FRAME), PROCESS_WAT)
    return builder.build()
