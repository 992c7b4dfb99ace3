"""
Path probing with PATH_CHALLENGE / PATH_RESPONSE.

PluginControl ops:
    1  queue a probe with 8 fresh random octets (status 2 when every slot is busy)
    2  latest measured latency as Duration (status 1 before any probe completed)
"""

from src.common.routines import INIT, PLUGIN_CONTROL, RoutineId, RoutineKind
from src.config import config
from src.sdk import PluginBuilder

NAME = "probe_path"
PATH_CHALLENGE = 0x1A
PATH_RESPONSE = 0x1B

OP_PROBE = 1
OP_LATENCY = 2
NO_MEASUREMENT = 1
SLOTS_BUSY = 2

# slot layout: state (0 free, 1 queued, 2 sent) | challenge data | sent at
SLOT_SIZE = 24
FREE, QUEUED, SENT = 0, 1, 2

SLOT_WAT = r"""
  (func $slot_addr (param $i i32) (result i32)
    (i32.add (i32.const {slots}) (i32.mul (local.get $i) (i32.const 24))))

  (func $find_slot (param $state i64) (param $data i64) (param $match_data i32) (result i32)
    (local $i i32)
    (local $p i32)
    (block $none
      (loop $next
        (br_if $none (i32.ge_u (local.get $i) (i32.const {MAX_PROBES})))
        (local.set $p (call $slot_addr (local.get $i)))
        (if (i64.eq (i64.load (local.get $p)) (local.get $state))
          (then
            (if (i32.or (i32.eqz (local.get $match_data))
                        (i64.eq (i64.load offset=8 (local.get $p)) (local.get $data)))
              (then (return (local.get $i))))))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $next)))
    (i32.const -1))

  (func $input_challenge (result i64)
    (drop (call $cq_fetch_input (i32.const 0)))
    (i64.load offset=2 (i32.const {IN_BUF})))
"""

CONTROL_WAT = """
    (local.set $op (call $cq_input_u64 (i32.const 0)))
    (if (i64.eq (local.get $op) (i64.const 1))
      (then
        (local.set $i (call $find_slot (i64.const 0) (i64.const 0) (i32.const 0)))
        (if (i32.lt_s (local.get $i) (i32.const 0))
          (then (return (i64.const {SLOTS_BUSY}))))
        (local.set $p (call $slot_addr (local.get $i)))
        (i64.store (local.get $p) (i64.const 1))
        (i64.store offset=8 (local.get $p) (call $random_u64))
        (i64.store offset=16 (local.get $p) (i64.const 0))
        (return (i64.const 0))))
    (if (i64.eq (local.get $op) (i64.const 2))
      (then
        (if (i64.lt_s (global.get $latency) (i64.const 0))
          (then (return (i64.const {NO_MEASUREMENT}))))
        (drop (call $cq_save_scalar (i32.const {T_DURATION}) (global.get $latency)))
        (return (i64.const 0))))
    (i64.const 3)
"""


def build() -> bytes:
    max_probes = config.plugins['probe_path']['max_probes']

    builder = PluginBuilder(NAME, permissions=["register"])
    builder.global_i64("latency", -1)
    builder.reserve("slots", SLOT_SIZE * max_probes)
    builder.constant("MAX_PROBES", max_probes)
    builder.constant("SLOTS_BUSY", SLOTS_BUSY)
    builder.constant("NO_MEASUREMENT", NO_MEASUREMENT)
    builder.declare_frame(PATH_CHALLENGE)
    builder.function(SLOT_WAT)

    builder.hook(INIT, f"""
    (drop (call $register_frame_type (i64.const {PATH_CHALLENGE})))
    (drop (call $enable_plugin))
    (i64.const 0)""")
    builder.hook(PLUGIN_CONTROL, CONTROL_WAT, locals_="(local $op i64) (local $i i32) (local $p i32)")

    builder.hook(RoutineId(RoutineKind.SHOULD_SEND_FRAME, PATH_CHALLENGE), """
    (drop (call $cq_save_bool
      (i32.ge_s (call $find_slot (i64.const 1) (i64.const 0) (i32.const 0)) (i32.const 0))))
    (i64.const 0)""")
    builder.hook(RoutineId(RoutineKind.PREPARE_FRAME, PATH_CHALLENGE), """
    (local.set $i (call $find_slot (i64.const 1) (i64.const 0) (i32.const 0)))
    (if (i32.lt_s (local.get $i) (i32.const 0))
      (then (return (i64.const 1))))
    (drop (call $cq_save_frame_u64 (i32.const 0x1a)
      (i64.load offset=8 (call $slot_addr (local.get $i)))))
    (i64.const 0)""", locals_="(local $i i32)")
    builder.hook(RoutineId(RoutineKind.ON_FRAME_RESERVED, PATH_CHALLENGE), """
    (local.set $i (call $find_slot (i64.const 1) (call $input_challenge) (i32.const 1)))
    (if (i32.ge_s (local.get $i) (i32.const 0))
      (then
        (local.set $p (call $slot_addr (local.get $i)))
        (i64.store (local.get $p) (i64.const 2))
        (i64.store offset=16 (local.get $p) (call $current_time))))
    (i64.const 0)""", locals_="(local $i i32) (local $p i32)")
    # a lost challenge goes back to the queue
    builder.hook(RoutineId(RoutineKind.NOTIFY_FRAME, PATH_CHALLENGE), """
    (local.set $data (call $input_challenge))
    (if (i64.eqz (call $cq_input_u64 (i32.const 1)))
      (then
        (local.set $i (call $find_slot (i64.const 2) (local.get $data) (i32.const 1)))
        (if (i32.ge_s (local.get $i) (i32.const 0))
          (then (i64.store (call $slot_addr (local.get $i)) (i64.const 1))))))
    (i64.const 0)""", locals_="(local $i i32) (local $data i64)")
    builder.hook(RoutineId(RoutineKind.PROCESS_FRAME, PATH_RESPONSE), """
    (local.set $i (call $find_slot (i64.const 2) (call $input_challenge) (i32.const 1)))
    (if (i32.lt_s (local.get $i) (i32.const 0))
      (then (return (i64.const 0))))
    (local.set $p (call $slot_addr (local.get $i)))
    (global.set $latency (i64.sub (call $current_time) (i64.load offset=16 (local.get $p))))
    (i64.store (local.get $p) (i64.const 0))
    (i64.const 0)""", locals_="(local $i i32) (local $p i32)")
    return builder.build()
