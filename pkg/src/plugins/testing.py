"""
Small plugins used by the test suites and the benchmark ladder.

They exercise one engine feature each (io staging, field access, timers,
capabilities, sandbox files, faults) and are built with the same SDK as the
protocol plugins.
"""

from src.common.fields import ConnectionField as F
from src.common.routines import INIT, ON_PLUGIN_TIMEOUT, PLUGIN_CONTROL, Anchor, RoutineId, RoutineKind
from src.sdk import PluginBuilder

MAX_DATA = 0x10
ENABLE_BODY = "(drop (call $enable_plugin)) (i64.const 0)"


def build_echo() -> bytes:
    """PluginControl hands every input (op included) back as an output."""
    builder = PluginBuilder("echo")
    builder.hook(INIT, ENABLE_BODY)
    builder.hook(PLUGIN_CONTROL, """
    (local.set $count (call $input_count))
    (block $done
      (loop $next
        (br_if $done (i32.ge_u (local.get $i) (local.get $count)))
        (local.set $n (call $get_input (local.get $i) (i32.const {IN_BUF}) (i32.const {IN_CAP})))
        (if (i32.lt_s (local.get $n) (i32.const 0))
          (then (return (i64.extend_i32_s (local.get $n)))))
        (drop (call $save_output (i32.const {IN_BUF}) (local.get $n)))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $next)))
    (i64.const 0)""", locals_="(local $i i32) (local $n i32) (local $count i32)")
    return builder.build()


def build_empty() -> bytes:
    builder = PluginBuilder("empty")
    builder.hook(INIT, ENABLE_BODY)
    builder.hook(PLUGIN_CONTROL, "(i64.const 0)")
    return builder.build()


def build_arith() -> bytes:
    """Outputs a+b, a-b, a*b and a/b (0 when b is 0) for U64 arguments a, b."""
    builder = PluginBuilder("arith")
    builder.hook(INIT, ENABLE_BODY)
    builder.hook(PLUGIN_CONTROL, """
    (local.set $a (call $cq_input_u64 (i32.const 1)))
    (local.set $b (call $cq_input_u64 (i32.const 2)))
    (drop (call $cq_save_scalar (i32.const {T_U64}) (i64.add (local.get $a) (local.get $b))))
    (drop (call $cq_save_scalar (i32.const {T_U64}) (i64.sub (local.get $a) (local.get $b))))
    (drop (call $cq_save_scalar (i32.const {T_U64}) (i64.mul (local.get $a) (local.get $b))))
    (if (i64.eqz (local.get $b))
      (then (drop (call $cq_save_scalar (i32.const {T_U64}) (i64.const 0))))
      (else (drop (call $cq_save_scalar (i32.const {T_U64}) (i64.div_u (local.get $a) (local.get $b))))))
    (i64.const 0)""", locals_="(local $a i64) (local $b i64)")
    return builder.build()


def build_max_data() -> bytes:
    """
    MAX_DATA implemented entirely in the plugin, matching the native rule:
    due when more than half the advertised limit is consumed, new limit
    rx_data + max_rx_data.
    """
    builder = PluginBuilder("max_data", permissions=["read", "write", "register", "bytes"])
    builder.require(F.RX_DATA, F.MAX_RX_DATA, F.MAX_TX_DATA)
    for fld in (F.RX_DATA, F.MAX_RX_DATA, F.MAX_TX_DATA):
        builder.constant(f"F_{fld.name}", int(fld))
    builder.declare_frame(MAX_DATA)

    def routine(kind: RoutineKind) -> RoutineId:
        return RoutineId(kind, MAX_DATA)

    builder.hook(INIT, """
    (drop (call $register_frame_type (i64.const 0x10)))
    (drop (call $enable_plugin))
    (i64.const 0)""")
    builder.hook(routine(RoutineKind.SHOULD_SEND_FRAME), """
    (drop (call $cq_save_bool
      (i64.gt_u (i64.shl (call $cq_field (i32.const {F_RX_DATA})) (i64.const 1))
                (call $cq_field (i32.const {F_MAX_RX_DATA})))))
    (i64.const 0)""")
    builder.hook(routine(RoutineKind.PREPARE_FRAME), """
    (drop (call $cq_save_frame_u64 (i32.const 0x10)
      (i64.add (call $cq_field (i32.const {F_RX_DATA})) (call $cq_field (i32.const {F_MAX_RX_DATA})))))
    (i64.const 0)""")
    builder.hook(routine(RoutineKind.FRAME_WIRE_LEN), """
    (drop (call $cq_fetch_input (i32.const 0)))
    (drop (call $cq_save_scalar (i32.const {T_USIZE})
      (i64.extend_i32_u (i32.add (i32.const 1)
        (call $cq_varint_len (i64.load offset=2 (i32.const {IN_BUF})))))))
    (i64.const 0)""")
    builder.hook(routine(RoutineKind.WRITE_FRAME), """
    (drop (call $cq_fetch_input (i32.const 0)))
    (local.set $max (i64.load offset=2 (i32.const {IN_BUF})))
    (local.set $tag (call $cq_input_cap (i32.const 1)))
    (if (i64.lt_s (local.get $tag) (i64.const 0))
      (then (return (i64.const 1))))
    (local.set $n (call $cq_varint_write (i32.const {SCRATCH}) (i64.const 0x10)))
    (local.set $n (i32.add (local.get $n)
      (call $cq_varint_write (i32.add (i32.const {SCRATCH}) (local.get $n)) (local.get $max))))
    (call $cq_cap_put (local.get $tag) (local.get $n))""",
                 locals_="(local $max i64) (local $tag i64) (local $n i32)")
    builder.hook(routine(RoutineKind.ON_FRAME_RESERVED), """
    (drop (call $cq_fetch_input (i32.const 0)))
    (drop (call $cq_set_field (i32.const {F_MAX_RX_DATA}) (i32.const {T_U64})
      (i64.load offset=2 (i32.const {IN_BUF}))))
    (i64.const 0)""")
    builder.hook(routine(RoutineKind.PARSE_FRAME), """
    (local.set $tag (call $cq_input_cap (i32.const 0)))
    (if (i64.lt_s (local.get $tag) (i64.const 0))
      (then (return (i64.const 1))))
    (local.set $n (i32.wrap_i64
      (select (global.get $cq_cap_read) (i64.const 9) (i64.lt_u (global.get $cq_cap_read) (i64.const 9)))))
    (if (i32.lt_s (call $bytes_read (local.get $tag) (i64.const 0) (i32.const {SCRATCH}) (local.get $n))
                  (i32.const 0))
      (then (return (i64.const 1))))
    (local.set $max (call $cq_varint_read (i32.add (i32.const {SCRATCH}) (i32.const 1))))
    (local.set $used (i32.add (i32.const 1) (global.get $cq_varint_used)))
    (if (i32.gt_u (local.get $used) (local.get $n))
      (then (return (i64.const 1))))
    (drop (call $cq_save_frame_u64 (i32.const 0x10) (local.get $max)))
    (drop (call $cq_save_scalar (i32.const {T_USIZE}) (i64.extend_i32_u (local.get $used))))
    (i64.const 0)""", locals_="(local $tag i64) (local $n i32) (local $max i64) (local $used i32)")
    builder.hook(routine(RoutineKind.PROCESS_FRAME), """
    (drop (call $cq_fetch_input (i32.const 0)))
    (local.set $max (i64.load offset=2 (i32.const {IN_BUF})))
    (if (i64.gt_u (local.get $max) (call $cq_field (i32.const {F_MAX_TX_DATA})))
      (then (drop (call $cq_set_field (i32.const {F_MAX_TX_DATA}) (i32.const {T_U64}) (local.get $max)))))
    (i64.const 0)""", locals_="(local $max i64)")
    return builder.build()


ACK = 0x02


def build_ack_writer() -> bytes:
    """
    Define hook for WriteFrame(ACK) producing the native wire image from the
    frame value. PluginControl reports how many ACKs it wrote.
    """
    builder = PluginBuilder("ack_writer", permissions=["bytes"])
    builder.global_i64("writes")
    builder.hook(INIT, ENABLE_BODY)
    builder.hook(RoutineId(RoutineKind.WRITE_FRAME, ACK), """
    (drop (call $cq_fetch_input (i32.const 0)))
    (local.set $count (i32.wrap_i64 (call $cq_varint_read (i32.add (i32.const {IN_BUF}) (i32.const 18)))))
    (local.set $src (i32.add (i32.const {IN_BUF}) (i32.add (i32.const 18) (global.get $cq_varint_used))))
    (local.set $n (call $cq_varint_write (i32.const {HEAP_BASE}) (i64.const 0x02)))
    (local.set $n (i32.add (local.get $n) (call $cq_varint_write
      (i32.add (i32.const {HEAP_BASE}) (local.get $n)) (i64.load offset=2 (i32.const {IN_BUF})))))
    (local.set $n (i32.add (local.get $n) (call $cq_varint_write
      (i32.add (i32.const {HEAP_BASE}) (local.get $n)) (i64.load offset=10 (i32.const {IN_BUF})))))
    (local.set $n (i32.add (local.get $n) (call $cq_varint_write
      (i32.add (i32.const {HEAP_BASE}) (local.get $n)) (i64.extend_i32_u (i32.sub (local.get $count) (i32.const 1))))))
    (local.set $n (i32.add (local.get $n) (call $cq_varint_write
      (i32.add (i32.const {HEAP_BASE}) (local.get $n)) (i64.load offset=8 (local.get $src)))))
    (local.set $src (i32.add (local.get $src) (i32.const 16)))
    (local.set $i (i32.const 1))
    (block $done
      (loop $next
        (br_if $done (i32.ge_u (local.get $i) (local.get $count)))
        (local.set $n (i32.add (local.get $n) (call $cq_varint_write
          (i32.add (i32.const {HEAP_BASE}) (local.get $n)) (i64.load (local.get $src)))))
        (local.set $n (i32.add (local.get $n) (call $cq_varint_write
          (i32.add (i32.const {HEAP_BASE}) (local.get $n)) (i64.load offset=8 (local.get $src)))))
        (local.set $src (i32.add (local.get $src) (i32.const 16)))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $next)))
    (local.set $tag (call $cq_input_cap (i32.const 1)))
    (if (i64.lt_s (local.get $tag) (i64.const 0))
      (then (return (i64.const 1))))
    (if (i32.lt_s (call $bytes_write (local.get $tag) (i64.const 0) (i32.const {HEAP_BASE}) (local.get $n))
                  (i32.const 0))
      (then (return (i64.const 1))))
    (global.set $writes (i64.add (global.get $writes) (i64.const 1)))
    (i64.const 0)""", locals_="(local $count i32) (local $src i32) (local $n i32) (local $i i32) (local $tag i64)")
    builder.hook(PLUGIN_CONTROL, """
    (drop (call $cq_save_scalar (i32.const {T_U64}) (global.get $writes)))
    (i64.const 0)""")
    return builder.build()


# ---------------------------------------------------------------------------
# API prober
# ---------------------------------------------------------------------------

PROBE_GET_FIELD = 1
PROBE_SET_FIELD = 2
PROBE_SET_TIMER = 3
PROBE_CANCEL_TIMER = 4
PROBE_TIMER_STATS = 5
PROBE_FILE_WRITE = 6
PROBE_FILE_READ = 7
PROBE_FILE_ESCAPE = 8
PROBE_BYTES_READ = 9
PROBE_BYTES_WRITE = 10
PROBE_SELF_CONTROL = 11
PROBE_NOW = 12
PROBE_INPUT_COUNT = 13
PROBE_MISSING_INPUT = 14
PROBE_REGISTER_FRAME = 15
PROBE_BEFORE_STATUSES = 16

PROBER_FRAME = 0xE1

PROBER_CONTROL_WAT = """
    (local.set $op (call $cq_input_u64 (i32.const 0)))
    (block $unknown
    (block $before
    (block $register
    (block $missing
    (block $count
    (block $now
    (block $self
    (block $bwrite
    (block $bread
    (block $escape
    (block $fread
    (block $fwrite
    (block $stats
    (block $cancel
    (block $timer
    (block $set
    (block $get
      (br_table $unknown $get $set $timer $cancel $stats $fwrite $fread $escape
                $bread $bwrite $self $now $count $missing $register $before $unknown
        (i32.wrap_i64 (select (local.get $op) (i64.const 17) (i64.lt_u (local.get $op) (i64.const 17))))))
    ;; 1: get_field(arg1), output is the field value as stored by the host
    (local.set $r (call $get_field (i32.wrap_i64 (call $cq_input_u64 (i32.const 1)))
      (i32.const {FIELD_BUF}) (i32.const {FIELD_CAP})))
    (if (i32.lt_s (local.get $r) (i32.const 0))
      (then (return (i64.extend_i32_s (local.get $r)))))
    (drop (call $save_output (i32.const {FIELD_BUF}) (local.get $r)))
    (return (i64.const 0)))
    ;; 2: set_field(arg1, U64 arg2)
    (return (i64.extend_i32_s
      (call $cq_set_field (i32.wrap_i64 (call $cq_input_u64 (i32.const 1))) (i32.const {T_U64})
        (call $cq_input_u64 (i32.const 2))))))
    ;; 3: set_timer(now + arg1, tag arg2), returns the timer id
    (return (call $cq_timer_after (call $cq_input_u64 (i32.const 1)) (call $cq_input_u64 (i32.const 2)))))
    ;; 4
    (return (i64.extend_i32_s (call $cancel_timer (call $cq_input_u64 (i32.const 1))))))
    ;; 5
    (drop (call $cq_save_scalar (i32.const {T_U64}) (global.get $fired)))
    (drop (call $cq_save_scalar (i32.const {T_U64}) (global.get $last_tag)))
    (return (i64.const 0)))
    ;; 6
    (return (i64.extend_i32_s
      (call $cq_file_put (i32.const {file_path}) (i32.const {file_path_len}) (i32.const 1)
        (i32.const {file_text}) (i32.const {file_text_len})))))
    ;; 7
    (local.set $r (call $cq_file_load (i32.const {file_path}) (i32.const {file_path_len})
      (i32.const {work}) (i32.const 256)))
    (if (i32.lt_s (local.get $r) (i32.const 0))
      (then (return (i64.extend_i32_s (local.get $r)))))
    (drop (call $cq_save_raw (i32.const {work}) (local.get $r)))
    (return (i64.const 0)))
    ;; 8
    (return (i64.extend_i32_s
      (call $cq_file_put (i32.const {escape_path}) (i32.const {escape_path_len}) (i32.const 1)
        (i32.const {file_text}) (i32.const {file_text_len})))))
    ;; 9: read what the capability in arg1 allows (at most 256 octets)
    (local.set $tag (call $cq_input_cap (i32.const 1)))
    (local.set $n (i32.wrap_i64
      (select (global.get $cq_cap_read) (i64.const 256) (i64.lt_u (global.get $cq_cap_read) (i64.const 256)))))
    (local.set $r (call $bytes_read (local.get $tag) (i64.const 0) (i32.const {work}) (local.get $n)))
    (if (i32.lt_s (local.get $r) (i32.const 0))
      (then (return (i64.extend_i32_s (local.get $r)))))
    (drop (call $cq_save_raw (i32.const {work}) (local.get $r)))
    (return (i64.const 0)))
    ;; 10: write arg2 octets of 0xab through the capability in arg1
    (local.set $tag (call $cq_input_cap (i32.const 1)))
    (local.set $n (i32.wrap_i64 (call $cq_input_u64 (i32.const 2))))
    (memory.fill (i32.const {SCRATCH}) (i32.const 0xab) (local.get $n))
    (return (call $cq_cap_put (local.get $tag) (local.get $n))))
    ;; 11: a plugin may not re-enter itself
    (return (call $cq_control (i32.const {self_name}) (i32.const {self_name_len}) (i64.const 12))))
    ;; 12
    (drop (call $cq_save_scalar (i32.const {T_INSTANT}) (call $current_time)))
    (return (i64.const 0)))
    ;; 13
    (drop (call $cq_save_scalar (i32.const {T_U64}) (i64.extend_i32_u (call $input_count))))
    (return (i64.const 0)))
    ;; 14
    (return (i64.extend_i32_s (call $get_input (i32.const 9) (i32.const {IN_BUF}) (i32.const {IN_CAP})))))
    ;; 15: register_frame_type(arg1)
    (return (i64.extend_i32_s (call $register_frame_type (call $cq_input_u64 (i32.const 1))))))
    ;; 16: statuses recorded by the read-only Before hook
    (drop (call $cq_save_scalar (i32.const {T_I64}) (global.get $before_set)))
    (drop (call $cq_save_scalar (i32.const {T_I64}) (global.get $before_register)))
    (drop (call $cq_save_scalar (i32.const {T_I64}) (global.get $before_timer)))
    (return (i64.const 0)))
    (i64.const 99)
"""

BEFORE_PROBE_WAT = """
    (global.set $before_set (i64.extend_i32_s
      (call $cq_set_field (i32.const {F_CWND}) (i32.const {T_U64}) (i64.const 100000))))
    (global.set $before_register (i64.extend_i32_s (call $register_frame_type (i64.const 0xe2))))
    (global.set $before_timer (call $cq_timer_after (i64.const 1000) (i64.const 1)))
    (i64.const 0)
"""


def build_api_prober() -> bytes:
    """PluginControl op N runs one API call and reports its status; see PROBE_* constants."""
    builder = PluginBuilder("api_prober", permissions=["read", "write", "register", "bytes", "file",
                                                       "timer", "control"])
    builder.constant("F_CWND", int(F.CWND))
    builder.data("self_name", b"api_prober")
    builder.data("file_path", b"probe.txt")
    builder.data("escape_path", b"../escape.txt")
    builder.data("file_text", b"hello sandbox")
    builder.reserve("work", 256)
    builder.global_i64("fired")
    builder.global_i64("last_tag")
    builder.global_i64("before_set", 1)
    builder.global_i64("before_register", 1)
    builder.global_i64("before_timer", 1)

    builder.hook(INIT, ENABLE_BODY)
    builder.hook(PLUGIN_CONTROL, PROBER_CONTROL_WAT,
                 locals_="(local $op i64) (local $tag i64) (local $n i32) (local $r i32)")
    builder.hook(ON_PLUGIN_TIMEOUT, """
    (global.set $fired (i64.add (global.get $fired) (i64.const 1)))
    (global.set $last_tag (call $cq_input_u64 (i32.const 0)))
    (i64.const 0)""")
    builder.hook(RoutineId(RoutineKind.SHOULD_SEND_FRAME, PROBER_FRAME), BEFORE_PROBE_WAT,
                 anchor=Anchor.BEFORE)
    return builder.build()


# ---------------------------------------------------------------------------
# Faulty plugins
# ---------------------------------------------------------------------------

FAULT_FRAME_TRAP = 0xE2
FAULT_FRAME_FUEL = 0xE3
FAULT_TP = 0xE4


def build_fault_trap() -> bytes:
    builder = PluginBuilder("fault_trap")
    builder.hook(INIT, ENABLE_BODY)
    builder.hook(RoutineId(RoutineKind.SHOULD_SEND_FRAME, FAULT_FRAME_TRAP), "(unreachable)")
    builder.hook(PLUGIN_CONTROL, "(unreachable)")
    return builder.build()


def build_fault_fuel() -> bytes:
    spin = "(loop $spin (br $spin)) (i64.const 0)"
    builder = PluginBuilder("fault_fuel")
    builder.hook(INIT, ENABLE_BODY)
    builder.hook(RoutineId(RoutineKind.SHOULD_SEND_FRAME, FAULT_FRAME_FUEL), spin)
    builder.hook(PLUGIN_CONTROL, spin)
    return builder.build()


def build_fault_oob() -> bytes:
    """
    PluginControl op 1 writes past its capability, op 2 uses a forged tag,
    op 3 hands the host a span outside linear memory. WriteTransportParameter
    writes a TLV longer than the capability allows.
    """
    builder = PluginBuilder("fault_oob", permissions=["register", "bytes"])
    builder.constant("FAULT_TP", FAULT_TP)
    builder.hook(INIT, """
    (drop (call $register_tp_type (i64.const {FAULT_TP})))
    (drop (call $enable_plugin))
    (i64.const 0)""")
    builder.hook(PLUGIN_CONTROL, """
    (local.set $op (call $cq_input_u64 (i32.const 0)))
    (if (i64.eq (local.get $op) (i64.const 1))
      (then
        (local.set $tag (call $cq_input_cap (i32.const 1)))
        (return (call $cq_cap_put (local.get $tag)
          (i32.add (i32.wrap_i64 (global.get $cq_cap_write)) (i32.const 1))))))
    (if (i64.eq (local.get $op) (i64.const 2))
      (then (return (call $cq_cap_put (i64.const 0x7fff0000) (i32.const 1)))))
    (if (i64.eq (local.get $op) (i64.const 3))
      (then (return (i64.extend_i32_s (call $save_output (i32.const 0x7ffffff0) (i32.const 64))))))
    (i64.const 0)""", locals_="(local $op i64) (local $tag i64)")
    builder.hook(RoutineId(RoutineKind.WRITE_TRANSPORT_PARAMETER, FAULT_TP), """
    (local.set $tag (call $cq_input_cap (i32.const 0)))
    (call $cq_cap_put (local.get $tag) (i32.const 300))""", locals_="(local $tag i64)")
    return builder.build()


def build_needs_field(fld: F = F.CWND) -> bytes:
    builder = PluginBuilder(f"needs_{fld.name.lower()}")
    builder.require(fld)
    builder.hook(INIT, ENABLE_BODY)
    return builder.build()


def build_single_hook(name: str, routine: RoutineId, anchor: Anchor = Anchor.DEFINE) -> bytes:
    """A plugin whose only hook returns OK; used to provoke Define conflicts."""
    builder = PluginBuilder(name)
    if routine != INIT:
        builder.hook(INIT, ENABLE_BODY)
    builder.hook(routine, "(i64.const 0)", anchor=anchor)
    return builder.build()


BAD_EXPORT_WAT = """
(module
  (memory (export "memory") 1)
  (func (export "init") (param i64) (result i64) (i64.const 0))
  (func (export "before_frobnicate_7") (param i64) (result i64) (i64.const 0)))
"""

# Raw module for the runtime-only benchmarks: no engine, no PluginVal staging
RAW_ARITH_WAT = """
(module
  (memory (export "memory") 1)
  (global $a (mut i64) (i64.const 0))
  (global $b (mut i64) (i64.const 0))
  (func (export "empty"))
  (func (export "store_operands") (param $x i64) (param $y i64)
    (global.set $a (local.get $x))
    (global.set $b (local.get $y)))
  (func (export "compute") (result i64)
    (i64.store (i32.const 0) (i64.add (global.get $a) (global.get $b)))
    (i64.store (i32.const 8) (i64.sub (global.get $a) (global.get $b)))
    (i64.store (i32.const 16) (i64.mul (global.get $a) (global.get $b)))
    (if (i64.eqz (global.get $b))
      (then (i64.store (i32.const 24) (i64.const 0)))
      (else (i64.store (i32.const 24) (i64.div_u (global.get $a) (global.get $b)))))
    (i64.const 0)))
"""


def build_bad_export() -> bytes:
    import wasmtime

    return bytes(wasmtime.wat2wasm(BAD_EXPORT_WAT))


def build_raw_arith() -> bytes:
    import wasmtime

    return bytes(wasmtime.wat2wasm(RAW_ARITH_WAT))
