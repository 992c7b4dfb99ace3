"""
BDP frame: congestion-window resumption across connections.

Both endpoints advertise an empty transport parameter; the plugin enables only
once the peer's copy is seen. The server reports {cwnd, min_rtt} in a BDP frame
after leaving slow start (and again when cwnd grows by a quarter). The client
keeps the latest report in its sandbox, one file per server identity, and echoes
it on its next connection. A server receiving an echo resumes
cwnd = min(saved, ceiling) and leaves slow start.

Frame wire image: type(varint) | cwnd(varint) | rtt_us(varint).
Record file `bdp-<identity>.txt`: identity line, cwnd line, rtt line (decimal).
The server ceiling is read from the sandbox file `ceiling` when present.
"""

from src.common.fields import ConnectionField as F
from src.common.routines import INIT, RoutineId, RoutineKind
from src.config import config
from src.sdk import PluginBuilder

NAME = "bdp_frame"
RECORD_PREFIX = b"bdp-"
RECORD_SUFFIX = b".txt"

HELPERS_WAT = r"""
  (global $f_cwnd (mut i64) (i64.const 0))
  (global $f_rtt (mut i64) (i64.const 0))

  (func $is_server (result i32)
    (i32.wrap_i64 (call $cq_field (i32.const {F_IS_SERVER}))))

  ;; decode the extension frame staged as input 0 into $f_cwnd / $f_rtt
  (func $load_frame (result i32)
    (local $n i32)
    (local.set $n (call $cq_fetch_input (i32.const 0)))
    (if (i32.lt_s (local.get $n) (i32.const 0))
      (then (return (local.get $n))))
    (if (i32.lt_u (i32.load8_u offset=10 (i32.const {IN_BUF})) (i32.const 2))
      (then (return (i32.const -6))))
    (global.set $f_cwnd (call $cq_ext_entry (i32.const {IN_BUF}) (i32.const 0)))
    (global.set $f_rtt (call $cq_ext_entry (i32.const {IN_BUF}) (i32.const 1)))
    (i32.const 0))

  (func $save_bdp_frame (param $cwnd i64) (param $rtt i64)
    (call $cq_frame_begin (i64.const {BDP_FRAME}))
    (call $cq_frame_push (i32.const {T_U64}) (local.get $cwnd))
    (call $cq_frame_push (i32.const {T_DURATION}) (local.get $rtt))
    (drop (call $cq_frame_save)))

  ;; bdp-<peer octets>-<port>.txt into $path_buf, returns its length (0 on failure)
  (func $record_path (result i32)
    (local $n i32)
    (local $i i32)
    (local $count i32)
    (local $addr i32)
    (if (i32.lt_s (call $get_field (i32.const {F_PEER_ADDR}) (i32.const {FIELD_BUF}) (i32.const {FIELD_CAP}))
                  (i32.const 0))
      (then (return (i32.const 0))))
    (memory.copy (i32.const {path_buf}) (i32.const {prefix}) (i32.const {prefix_len}))
    (local.set $n (i32.const {prefix_len}))
    (local.set $count
      (select (i32.const 4) (i32.const 16)
        (i32.eq (i32.load8_u offset=1 (i32.const {FIELD_BUF})) (i32.const 4))))
    (local.set $addr (i32.add (i32.const {FIELD_BUF}) (i32.const 2)))
    (block $done
      (loop $next
        (br_if $done (i32.ge_u (local.get $i) (local.get $count)))
        (local.set $n (i32.add (local.get $n)
          (call $cq_fmt_u64 (i32.add (i32.const {path_buf}) (local.get $n))
            (i64.load8_u (i32.add (local.get $addr) (local.get $i))))))
        (i32.store8 (i32.add (i32.const {path_buf}) (local.get $n)) (i32.const 45))
        (local.set $n (i32.add (local.get $n) (i32.const 1)))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $next)))
    (local.set $n (i32.add (local.get $n)
      (call $cq_fmt_u64 (i32.add (i32.const {path_buf}) (local.get $n))
        (i64.load16_u (i32.add (local.get $addr) (local.get $count))))))
    (memory.copy (i32.add (i32.const {path_buf}) (local.get $n)) (i32.const {suffix}) (i32.const {suffix_len}))
    (i32.add (local.get $n) (i32.const {suffix_len})))

  (func $skip_line (param $p i32) (param $len i32) (result i32)
    (local $i i32)
    (block $done
      (loop $next
        (br_if $done (i32.ge_u (local.get $i) (local.get $len)))
        (if (i32.eq (i32.load8_u (i32.add (local.get $p) (local.get $i))) (i32.const 10))
          (then (return (i32.add (local.get $i) (i32.const 1)))))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $next)))
    (local.get $len))

  (func $load_record
    (local $plen i32)
    (local $n i32)
    (local $off i32)
    (local.set $plen (call $record_path))
    (if (i32.eqz (local.get $plen))
      (then (return)))
    (local.set $n (call $cq_file_load (i32.const {path_buf}) (local.get $plen)
      (i32.const {text_buf}) (i32.const {text_buf_len})))
    (if (i32.le_s (local.get $n) (i32.const 0))
      (then (return)))
    (local.set $off (call $skip_line (i32.const {text_buf}) (local.get $n)))
    (global.set $rec_cwnd (call $cq_parse_u64 (i32.add (i32.const {text_buf}) (local.get $off))
      (i32.sub (local.get $n) (local.get $off))))
    (if (i32.eqz (global.get $cq_parse_used))
      (then (return)))
    (local.set $off (i32.add (local.get $off) (i32.add (global.get $cq_parse_used) (i32.const 1))))
    (if (i32.ge_u (local.get $off) (local.get $n))
      (then (return)))
    (global.set $rec_rtt (call $cq_parse_u64 (i32.add (i32.const {text_buf}) (local.get $off))
      (i32.sub (local.get $n) (local.get $off))))
    (if (i32.eqz (global.get $cq_parse_used))
      (then (return)))
    (global.set $have_record (i32.const 1)))

  (func $store_record (param $cwnd i64) (param $rtt i64)
    (local $plen i32)
    (local $n i32)
    (local.set $plen (call $record_path))
    (if (i32.eqz (local.get $plen))
      (then (return)))
    ;; identity line is the file name without prefix and suffix
    (local.set $n (i32.sub (local.get $plen) (i32.const {RECORD_OVERHEAD})))
    (memory.copy (i32.const {text_buf}) (i32.add (i32.const {path_buf}) (i32.const {prefix_len})) (local.get $n))
    (i32.store8 (i32.add (i32.const {text_buf}) (local.get $n)) (i32.const 10))
    (local.set $n (i32.add (local.get $n) (i32.const 1)))
    (local.set $n (i32.add (local.get $n)
      (call $cq_fmt_u64 (i32.add (i32.const {text_buf}) (local.get $n)) (local.get $cwnd))))
    (i32.store8 (i32.add (i32.const {text_buf}) (local.get $n)) (i32.const 10))
    (local.set $n (i32.add (local.get $n) (i32.const 1)))
    (local.set $n (i32.add (local.get $n)
      (call $cq_fmt_u64 (i32.add (i32.const {text_buf}) (local.get $n)) (local.get $rtt))))
    (i32.store8 (i32.add (i32.const {text_buf}) (local.get $n)) (i32.const 10))
    (drop (call $cq_file_put (i32.const {path_buf}) (local.get $plen) (i32.const 1)
      (i32.const {text_buf}) (i32.add (local.get $n) (i32.const 1)))))
"""

INIT_WAT = """
    (drop (call $register_tp_type (i64.const {BDP_TP})))
    (drop (call $register_frame_type (i64.const {BDP_FRAME})))
    (local.set $n (call $cq_file_load (i32.const {ceiling_path}) (i32.const {ceiling_path_len})
      (i32.const {text_buf}) (i32.const 32)))
    (if (i32.gt_s (local.get $n) (i32.const 0))
      (then
        (local.set $v (call $cq_parse_u64 (i32.const {text_buf}) (local.get $n)))
        (if (global.get $cq_parse_used)
          (then (global.set $ceiling (local.get $v))))))
    (if (i32.eqz (call $is_server))
      (then (call $load_record)))
    (i64.const 0)
"""

# server: report once out of slow start, refresh when cwnd grew by a quarter
SHOULD_SEND_WAT = """
    (if (call $is_server)
      (then
        (local.set $cwnd (call $cq_field (i32.const {F_CWND})))
        (local.set $send
          (i32.and
            (i32.and (i32.eqz (global.get $in_flight))
                     (i32.eqz (i32.wrap_i64 (call $cq_field (i32.const {F_IN_SLOW_START})))))
            (i32.or (i32.eqz (global.get $reported))
                    (i64.gt_u (i64.mul (local.get $cwnd) (i64.const 4))
                              (i64.mul (global.get $last_cwnd) (i64.const 5)))))))
      (else
        (local.set $send
          (i32.and (global.get $have_record)
                   (i32.and (i32.eqz (global.get $echoed)) (i32.eqz (global.get $in_flight)))))))
    (drop (call $cq_save_bool (local.get $send)))
    (i64.const 0)
"""

PREPARE_WAT = """
    (if (call $is_server)
      (then
        (call $save_bdp_frame (call $cq_field (i32.const {F_CWND})) (call $cq_field (i32.const {F_MIN_RTT}))))
      (else
        (call $save_bdp_frame (global.get $rec_cwnd) (global.get $rec_rtt))))
    (i64.const 0)
"""

WIRE_LEN_WAT = """
    (if (i32.lt_s (call $load_frame) (i32.const 0))
      (then (return (i64.const 1))))
    (drop (call $cq_save_scalar (i32.const {T_USIZE})
      (i64.extend_i32_u
        (i32.add (call $cq_varint_len (i64.const {BDP_FRAME}))
          (i32.add (call $cq_varint_len (global.get $f_cwnd)) (call $cq_varint_len (global.get $f_rtt)))))))
    (i64.const 0)
"""

WRITE_WAT = """
    (if (i32.lt_s (call $load_frame) (i32.const 0))
      (then (return (i64.const 1))))
    (local.set $tag (call $cq_input_cap (i32.const 1)))
    (if (i64.lt_s (local.get $tag) (i64.const 0))
      (then (return (i64.const 1))))
    (local.set $n (call $cq_varint_write (i32.const {SCRATCH}) (i64.const {BDP_FRAME})))
    (local.set $n (i32.add (local.get $n)
      (call $cq_varint_write (i32.add (i32.const {SCRATCH}) (local.get $n)) (global.get $f_cwnd))))
    (local.set $n (i32.add (local.get $n)
      (call $cq_varint_write (i32.add (i32.const {SCRATCH}) (local.get $n)) (global.get $f_rtt))))
    (call $cq_cap_put (local.get $tag) (local.get $n))
"""

RESERVED_WAT = """
    (if (i32.lt_s (call $load_frame) (i32.const 0))
      (then (return (i64.const 1))))
    (global.set $in_flight (i32.const 1))
    (if (call $is_server)
      (then
        (global.set $reported (i32.const 1))
        (global.set $last_cwnd (global.get $f_cwnd)))
      (else (global.set $echoed (i32.const 1))))
    (i64.const 0)
"""

NOTIFY_WAT = """
    (global.set $in_flight (i32.const 0))
    (if (i64.eqz (call $cq_input_u64 (i32.const 1)))
      (then
        (if (call $is_server)
          (then (global.set $reported (i32.const 0)))
          (else (global.set $echoed (i32.const 0))))))
    (i64.const 0)
"""

PARSE_WAT = """
    (local.set $tag (call $cq_input_cap (i32.const 0)))
    (if (i64.lt_s (local.get $tag) (i64.const 0))
      (then (return (i64.const 1))))
    (local.set $n (i32.wrap_i64
      (select (global.get $cq_cap_read) (i64.const 32) (i64.lt_u (global.get $cq_cap_read) (i64.const 32)))))
    (if (i32.lt_s (call $bytes_read (local.get $tag) (i64.const 0) (i32.const {SCRATCH}) (local.get $n))
                  (i32.const 0))
      (then (return (i64.const 1))))
    (drop (call $cq_varint_read (i32.const {SCRATCH})))
    (local.set $off (global.get $cq_varint_used))
    (local.set $cwnd (call $cq_varint_read (i32.add (i32.const {SCRATCH}) (local.get $off))))
    (local.set $off (i32.add (local.get $off) (global.get $cq_varint_used)))
    (local.set $rtt (call $cq_varint_read (i32.add (i32.const {SCRATCH}) (local.get $off))))
    (local.set $off (i32.add (local.get $off) (global.get $cq_varint_used)))
    (if (i32.gt_u (local.get $off) (local.get $n))
      (then (return (i64.const 1))))
    (call $save_bdp_frame (local.get $cwnd) (local.get $rtt))
    (drop (call $cq_save_scalar (i32.const {T_USIZE}) (i64.extend_i32_u (local.get $off))))
    (i64.const 0)
"""

PROCESS_WAT = """
    (if (i32.lt_s (call $load_frame) (i32.const 0))
      (then (return (i64.const 1))))
    (if (call $is_server)
      (then
        (local.set $cwnd
          (select (global.get $ceiling) (global.get $f_cwnd)
            (i64.gt_u (global.get $f_cwnd) (global.get $ceiling))))
        (drop (call $cq_set_field (i32.const {F_CWND}) (i32.const {T_U64}) (local.get $cwnd)))
        (drop (call $cq_set_field (i32.const {F_SSTHRESH}) (i32.const {T_U64}) (local.get $cwnd)))
        (drop (call $cq_set_field (i32.const {F_IN_SLOW_START}) (i32.const {T_BOOL}) (i64.const 0)))
        (call $cq_log (i32.const {msg_resumed}) (i32.const {msg_resumed_len})))
      (else
        (call $store_record (global.get $f_cwnd) (global.get $f_rtt))))
    (i64.const 0)
"""

LOG_WAT = """
    (if (i32.lt_s (call $load_frame) (i32.const 0))
      (then (return (i64.const 1))))
    (memory.copy (i32.const {text_buf}) (i32.const {lbl_cwnd}) (i32.const {lbl_cwnd_len}))
    (local.set $n (i32.const {lbl_cwnd_len}))
    (local.set $n (i32.add (local.get $n)
      (call $cq_fmt_u64 (i32.add (i32.const {text_buf}) (local.get $n)) (global.get $f_cwnd))))
    (memory.copy (i32.add (i32.const {text_buf}) (local.get $n)) (i32.const {lbl_rtt}) (i32.const {lbl_rtt_len}))
    (local.set $n (i32.add (local.get $n) (i32.const {lbl_rtt_len})))
    (local.set $n (i32.add (local.get $n)
      (call $cq_fmt_u64 (i32.add (i32.const {text_buf}) (local.get $n)) (global.get $f_rtt))))
    (drop (call $cq_save_raw (i32.const {text_buf}) (local.get $n)))
    (i64.const 0)
"""


def build(frame_type: int = None, tp_type: int = None, ceiling: int = None) -> bytes:
    settings = config.plugins['bdp_frame']
    frame_type = settings['frame_type'] if frame_type is None else frame_type
    tp_type = settings['tp_type'] if tp_type is None else tp_type
    ceiling = settings['ceiling_octets'] if ceiling is None else ceiling

    builder = PluginBuilder(NAME, needs_negotiation=True,
                            permissions=["read", "write", "register", "bytes", "file"])
    builder.require(F.IS_SERVER, F.PEER_ADDR, F.CWND, F.SSTHRESH, F.MIN_RTT, F.IN_SLOW_START)
    builder.declare_frame(frame_type).declare_tp(tp_type)
    builder.constant("BDP_FRAME", frame_type)
    builder.constant("BDP_TP", tp_type)
    builder.constant("RECORD_OVERHEAD", len(RECORD_PREFIX) + len(RECORD_SUFFIX))
    for fld in (F.IS_SERVER, F.PEER_ADDR, F.CWND, F.SSTHRESH, F.MIN_RTT, F.IN_SLOW_START):
        builder.constant(f"F_{fld.name}", int(fld))

    builder.global_i64("ceiling", ceiling)
    builder.global_i32("have_record")
    builder.global_i64("rec_cwnd")
    builder.global_i64("rec_rtt")
    builder.global_i32("echoed")
    builder.global_i32("reported")
    builder.global_i32("in_flight")
    builder.global_i64("last_cwnd")

    builder.data("prefix", RECORD_PREFIX)
    builder.data("suffix", RECORD_SUFFIX)
    builder.data("ceiling_path", b"ceiling")
    builder.data("lbl_cwnd", b"BDP cwnd=")
    builder.data("lbl_rtt", b" rtt=")
    builder.data("msg_resumed", b"congestion state resumed")
    builder.reserve("path_buf", 128)
    builder.reserve("text_buf", 256)
    builder.function(HELPERS_WAT)

    def routine(kind: RoutineKind) -> RoutineId:
        return RoutineId(kind, frame_type)

    builder.hook(INIT, INIT_WAT, locals_="(local $n i32) (local $v i64)")
    builder.hook(RoutineId(RoutineKind.WRITE_TRANSPORT_PARAMETER, tp_type),
                 "(call $cq_write_tp_flag (i64.const {BDP_TP}))")
    builder.hook(RoutineId(RoutineKind.DECODE_TRANSPORT_PARAMETER, tp_type),
                 "(drop (call $enable_plugin)) (i64.const 0)")
    builder.hook(routine(RoutineKind.SHOULD_SEND_FRAME), SHOULD_SEND_WAT,
                 locals_="(local $send i32) (local $cwnd i64)")
    builder.hook(routine(RoutineKind.PREPARE_FRAME), PREPARE_WAT)
    builder.hook(routine(RoutineKind.FRAME_WIRE_LEN), WIRE_LEN_WAT)
    builder.hook(routine(RoutineKind.WRITE_FRAME), WRITE_WAT, locals_="(local $tag i64) (local $n i32)")
    builder.hook(routine(RoutineKind.ON_FRAME_RESERVED), RESERVED_WAT)
    builder.hook(routine(RoutineKind.NOTIFY_FRAME), NOTIFY_WAT)
    builder.hook(routine(RoutineKind.PARSE_FRAME), PARSE_WAT,
                 locals_="(local $tag i64) (local $n i32) (local $off i32) (local $cwnd i64) (local $rtt i64)")
    builder.hook(routine(RoutineKind.PROCESS_FRAME), PROCESS_WAT, locals_="(local $cwnd i64)")
    builder.hook(routine(RoutineKind.LOG_FRAME), LOG_WAT, locals_="(local $n i32)")
    return builder.build()
