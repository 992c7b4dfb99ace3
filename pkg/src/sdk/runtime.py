"""
WAT runtime linked into every SDK-built plugin.

These helpers own all boundary serialization: plugin code deals in scalars,
frames and fields, never in the raw PluginVal octets. Placeholders such as
{IN_BUF} are filled from the memory layout at build time.

Helper summary:
    $cq_fetch_input i            -> encoded length of input i in IN_BUF (or status)
    $cq_input_u64 i              -> input i as an integer
    $cq_input_cap i              -> tag of Bytes input i; limits in $cq_cap_read/$cq_cap_write
    $cq_scalar_at p / _len p     -> decode a scalar PluginVal in memory
    $cq_put_scalar p tag v       -> encode a scalar PluginVal, returns its length
    $cq_save_scalar tag v        -> save_output of a scalar
    $cq_save_bool b
    $cq_field f / $cq_set_field f tag v
    $cq_frame_begin type / $cq_frame_push tag v / $cq_frame_save
    $cq_save_frame_u64 kind v    -> Padding, MaxData, PathChallenge, PathResponse outputs
    $cq_ext_entry p i            -> scalar entry i of an extension frame encoded at p
    $cq_varint_len v / $cq_varint_write p v / $cq_varint_read p
    $cq_fmt_u64 p v / $cq_parse_u64 p len
    $cq_file_put path len mode ptr n / $cq_file_load path len ptr cap
    $cq_log ptr len / $cq_timer_after delay tag / $cq_control name len op
    $cq_save_raw ptr len          -> save_output of a RawBuffer
    $cq_cap_put tag n            -> write SCRATCH[0..n] through a Bytes capability
    $cq_write_tp_flag type       -> WriteTransportParameter body for an empty-valued TP
    $cq_random_below n
"""

from src.common.abi import ABI_NAMESPACE, IMPORTS, LAYOUT

RUNTIME_WAT = r"""
  (global $cq_last_error (mut i32) (i32.const 0))
  (global $cq_varint_used (mut i32) (i32.const 0))
  (global $cq_parse_used (mut i32) (i32.const 0))
  (global $cq_frame_len (mut i32) (i32.const 0))
  (global $cq_cap_read (mut i64) (i64.const 0))
  (global $cq_cap_write (mut i64) (i64.const 0))

  (func $cq_fetch_input (param $i i32) (result i32)
    (local $n i32)
    (local.set $n (call $get_input (local.get $i) (i32.const {IN_BUF}) (i32.const {IN_CAP})))
    (if (i32.lt_s (local.get $n) (i32.const 0))
      (then (global.set $cq_last_error (local.get $n))))
    (local.get $n))

  (func $cq_scalar_len (param $p i32) (result i32)
    (local $tag i32)
    (local.set $tag (i32.load8_u (local.get $p)))
    (if (i32.eq (local.get $tag) (i32.const 1))
      (then (return (i32.const 2))))
    (if (i32.or (i32.eq (local.get $tag) (i32.const 2)) (i32.eq (local.get $tag) (i32.const 4)))
      (then (return (i32.const 5))))
    (if (i32.and (i32.ge_u (local.get $tag) (i32.const 3)) (i32.le_u (local.get $tag) (i32.const 8)))
      (then (return (i32.const 9))))
    (i32.const 0))

  (func $cq_scalar_at (param $p i32) (result i64)
    (local $tag i32)
    (local.set $tag (i32.load8_u (local.get $p)))
    (if (i32.eq (local.get $tag) (i32.const 1))
      (then (return (i64.load8_u offset=1 (local.get $p)))))
    (if (i32.eq (local.get $tag) (i32.const 2))
      (then (return (i64.load32_s offset=1 (local.get $p)))))
    (if (i32.eq (local.get $tag) (i32.const 4))
      (then (return (i64.load32_u offset=1 (local.get $p)))))
    (if (i32.and (i32.ge_u (local.get $tag) (i32.const 3)) (i32.le_u (local.get $tag) (i32.const 8)))
      (then (return (i64.load offset=1 (local.get $p)))))
    ;; TYPE_MISMATCH
    (global.set $cq_last_error (i32.const -7))
    (i64.const 0))

  (func $cq_input_u64 (param $i i32) (result i64)
    (if (i32.lt_s (call $cq_fetch_input (local.get $i)) (i32.const 0))
      (then (return (i64.const 0))))
    (call $cq_scalar_at (i32.const {IN_BUF})))

  (func $cq_input_cap (param $i i32) (result i64)
    (if (i32.lt_s (call $cq_fetch_input (local.get $i)) (i32.const 0))
      (then (return (i64.const -1))))
    (if (i32.ne (i32.load8_u (i32.const {IN_BUF})) (i32.const 12))
      (then
        (global.set $cq_last_error (i32.const -7))
        (return (i64.const -1))))
    (global.set $cq_cap_read (i64.load offset=9 (i32.const {IN_BUF})))
    (global.set $cq_cap_write (i64.load offset=17 (i32.const {IN_BUF})))
    (i64.load offset=1 (i32.const {IN_BUF})))

  (func $cq_put_scalar (param $p i32) (param $tag i32) (param $v i64) (result i32)
    (i32.store8 (local.get $p) (local.get $tag))
    (if (i32.eq (local.get $tag) (i32.const 1))
      (then
        (i64.store8 offset=1 (local.get $p) (i64.extend_i32_u (i64.ne (local.get $v) (i64.const 0))))
        (return (i32.const 2))))
    (if (i32.or (i32.eq (local.get $tag) (i32.const 2)) (i32.eq (local.get $tag) (i32.const 4)))
      (then
        (i64.store32 offset=1 (local.get $p) (local.get $v))
        (return (i32.const 5))))
    (i64.store offset=1 (local.get $p) (local.get $v))
    (i32.const 9))

  (func $cq_save_scalar (param $tag i32) (param $v i64) (result i32)
    (call $save_output (i32.const {SCRATCH})
      (call $cq_put_scalar (i32.const {SCRATCH}) (local.get $tag) (local.get $v))))

  (func $cq_save_bool (param $b i32) (result i32)
    (call $cq_save_scalar (i32.const 1) (i64.extend_i32_u (local.get $b))))

  (func $cq_field (param $f i32) (result i64)
    (local $n i32)
    (local.set $n (call $get_field (local.get $f) (i32.const {FIELD_BUF}) (i32.const {FIELD_CAP})))
    (if (i32.lt_s (local.get $n) (i32.const 0))
      (then
        (global.set $cq_last_error (local.get $n))
        (return (i64.const 0))))
    (call $cq_scalar_at (i32.const {FIELD_BUF})))

  (func $cq_set_field (param $f i32) (param $tag i32) (param $v i64) (result i32)
    (call $set_field (local.get $f) (i32.const {FIELD_BUF})
      (call $cq_put_scalar (i32.const {FIELD_BUF}) (local.get $tag) (local.get $v))))

  (func $cq_frame_begin (param $type i64)
    (i32.store8 (i32.const {FRAME_BUF}) (i32.const 10))
    (i32.store8 offset=1 (i32.const {FRAME_BUF}) (i32.const 0xff))
    (i64.store offset=2 (i32.const {FRAME_BUF}) (local.get $type))
    (i32.store8 offset=10 (i32.const {FRAME_BUF}) (i32.const 0))
    (global.set $cq_frame_len (i32.const 11)))

  (func $cq_frame_push (param $tag i32) (param $v i64)
    (global.set $cq_frame_len
      (i32.add (global.get $cq_frame_len)
        (call $cq_put_scalar
          (i32.add (i32.const {FRAME_BUF}) (global.get $cq_frame_len))
          (local.get $tag) (local.get $v))))
    (i32.store8 offset=10 (i32.const {FRAME_BUF})
      (i32.add (i32.load8_u offset=10 (i32.const {FRAME_BUF})) (i32.const 1))))

  (func $cq_frame_save (result i32)
    (call $save_output (i32.const {FRAME_BUF}) (global.get $cq_frame_len)))

  (func $cq_save_frame_u64 (param $kind i32) (param $v i64) (result i32)
    (i32.store8 (i32.const {SCRATCH}) (i32.const 10))
    (i32.store8 offset=1 (i32.const {SCRATCH}) (local.get $kind))
    (i64.store offset=2 (i32.const {SCRATCH}) (local.get $v))
    (call $save_output (i32.const {SCRATCH}) (i32.const 10)))

  (func $cq_ext_entry (param $p i32) (param $idx i32) (result i64)
    (local $q i32)
    (if (i32.ge_u (local.get $idx) (i32.load8_u offset=10 (local.get $p)))
      (then
        ;; INPUT_MISSING
        (global.set $cq_last_error (i32.const -6))
        (return (i64.const 0))))
    (local.set $q (i32.add (local.get $p) (i32.const 11)))
    (block $done
      (loop $next
        (br_if $done (i32.eqz (local.get $idx)))
        (local.set $q (i32.add (local.get $q) (call $cq_scalar_len (local.get $q))))
        (local.set $idx (i32.sub (local.get $idx) (i32.const 1)))
        (br $next)))
    (call $cq_scalar_at (local.get $q)))

  (func $cq_varint_len (param $v i64) (result i32)
    (if (i64.lt_u (local.get $v) (i64.const 64))
      (then (return (i32.const 1))))
    (if (i64.lt_u (local.get $v) (i64.const 16384))
      (then (return (i32.const 2))))
    (if (i64.lt_u (local.get $v) (i64.const 1073741824))
      (then (return (i32.const 4))))
    (i32.const 8))

  (func $cq_varint_write (param $p i32) (param $v i64) (result i32)
    (local $n i32)
    (local $i i32)
    (local.set $n (call $cq_varint_len (local.get $v)))
    (local.set $i (local.get $n))
    (block $done
      (loop $next
        (br_if $done (i32.eqz (local.get $i)))
        (local.set $i (i32.sub (local.get $i) (i32.const 1)))
        (i64.store8 (i32.add (local.get $p) (local.get $i)) (local.get $v))
        (local.set $v (i64.shr_u (local.get $v) (i64.const 8)))
        (br $next)))
    (i32.store8 (local.get $p)
      (i32.or (i32.load8_u (local.get $p))
        (i32.shl (i32.ctz (local.get $n)) (i32.const 6))))
    (local.get $n))

  (func $cq_varint_read (param $p i32) (result i64)
    (local $n i32)
    (local $i i32)
    (local $v i64)
    (local.set $v (i64.load8_u (local.get $p)))
    (local.set $n (i32.shl (i32.const 1) (i32.wrap_i64 (i64.shr_u (local.get $v) (i64.const 6)))))
    (local.set $v (i64.and (local.get $v) (i64.const 63)))
    (local.set $i (i32.const 1))
    (block $done
      (loop $next
        (br_if $done (i32.ge_u (local.get $i) (local.get $n)))
        (local.set $v
          (i64.or (i64.shl (local.get $v) (i64.const 8))
            (i64.load8_u (i32.add (local.get $p) (local.get $i)))))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $next)))
    (global.set $cq_varint_used (local.get $n))
    (local.get $v))

  (func $cq_fmt_u64 (param $p i32) (param $v i64) (result i32)
    (local $n i32)
    (local $i i32)
    (local $t i64)
    (local.set $t (local.get $v))
    (loop $count
      (local.set $n (i32.add (local.get $n) (i32.const 1)))
      (local.set $t (i64.div_u (local.get $t) (i64.const 10)))
      (br_if $count (i64.ne (local.get $t) (i64.const 0))))
    (local.set $i (local.get $n))
    (loop $digit
      (local.set $i (i32.sub (local.get $i) (i32.const 1)))
      (i32.store8 (i32.add (local.get $p) (local.get $i))
        (i32.add (i32.const 48) (i32.wrap_i64 (i64.rem_u (local.get $v) (i64.const 10)))))
      (local.set $v (i64.div_u (local.get $v) (i64.const 10)))
      (br_if $digit (i32.ne (local.get $i) (i32.const 0))))
    (local.get $n))

  (func $cq_parse_u64 (param $p i32) (param $len i32) (result i64)
    (local $i i32)
    (local $c i32)
    (local $v i64)
    (block $done
      (loop $next
        (br_if $done (i32.ge_u (local.get $i) (local.get $len)))
        (local.set $c (i32.load8_u (i32.add (local.get $p) (local.get $i))))
        (br_if $done
          (i32.or (i32.lt_u (local.get $c) (i32.const 48)) (i32.gt_u (local.get $c) (i32.const 57))))
        (local.set $v
          (i64.add (i64.mul (local.get $v) (i64.const 10))
            (i64.extend_i32_u (i32.sub (local.get $c) (i32.const 48)))))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $next)))
    (global.set $cq_parse_used (local.get $i))
    (local.get $v))

  (func $cq_file_put (param $path i32) (param $path_len i32) (param $mode i32)
                     (param $ptr i32) (param $len i32) (result i32)
    (local $fd i32)
    (local $r i32)
    (local.set $fd (call $file_open (local.get $path) (local.get $path_len) (local.get $mode)))
    (if (i32.lt_s (local.get $fd) (i32.const 0))
      (then (return (local.get $fd))))
    (local.set $r (call $file_write (local.get $fd) (local.get $ptr) (local.get $len)))
    (drop (call $file_close (local.get $fd)))
    (local.get $r))

  (func $cq_file_load (param $path i32) (param $path_len i32) (param $ptr i32) (param $cap i32) (result i32)
    (local $fd i32)
    (local $r i32)
    (local.set $fd (call $file_open (local.get $path) (local.get $path_len) (i32.const 0)))
    (if (i32.lt_s (local.get $fd) (i32.const 0))
      (then (return (local.get $fd))))
    (local.set $r (call $file_read (local.get $fd) (local.get $ptr) (local.get $cap)))
    (drop (call $file_close (local.get $fd)))
    (local.get $r))

  (func $cq_log (param $ptr i32) (param $len i32)
    (drop (call $log_line (local.get $ptr) (local.get $len))))

  (func $cq_timer_after (param $delay i64) (param $tag i64) (result i64)
    (call $set_timer (i64.add (call $current_time) (local.get $delay)) (local.get $tag)))

  (func $cq_control (param $name i32) (param $name_len i32) (param $op i64) (result i64)
    (call $plugin_control (local.get $name) (local.get $name_len) (local.get $op)
      (i32.const 0) (i32.const 0)))

  (func $cq_save_raw (param $src i32) (param $len i32) (result i32)
    (local $n i32)
    (i32.store8 (i32.const {OUT_BUF}) (i32.const 13))
    (local.set $n (i32.add (i32.const 1)
      (call $cq_varint_write (i32.add (i32.const {OUT_BUF}) (i32.const 1)) (i64.extend_i32_u (local.get $len)))))
    (memory.copy (i32.add (i32.const {OUT_BUF}) (local.get $n)) (local.get $src) (local.get $len))
    (call $save_output (i32.const {OUT_BUF}) (i32.add (local.get $n) (local.get $len))))

  (func $cq_cap_put (param $tag i64) (param $len i32) (result i64)
    (local $r i32)
    (local.set $r (call $bytes_write (local.get $tag) (i64.const 0) (i32.const {SCRATCH}) (local.get $len)))
    (if (i32.lt_s (local.get $r) (i32.const 0))
      (then (return (i64.extend_i32_s (local.get $r)))))
    (i64.const 0))

  (func $cq_write_tp_flag (param $type i64) (result i64)
    (local $tag i64)
    (local $n i32)
    (local.set $tag (call $cq_input_cap (i32.const 0)))
    (if (i64.lt_s (local.get $tag) (i64.const 0))
      (then (return (i64.extend_i32_s (global.get $cq_last_error)))))
    (local.set $n (call $cq_varint_write (i32.const {SCRATCH}) (local.get $type)))
    (i32.store8 (i32.add (i32.const {SCRATCH}) (local.get $n)) (i32.const 0))
    (call $cq_cap_put (local.get $tag) (i32.add (local.get $n) (i32.const 1))))

  (func $cq_random_below (param $n i64) (result i64)
    (i64.rem_u (call $random_u64) (local.get $n)))
"""


def import_declarations() -> str:
    """WAT import list for the whole cq-abi-1 surface."""
    lines = []
    for name, (params, results) in IMPORTS.items():
        sig = ""
        if params:
            sig += f" (param {' '.join(params)})"
        if results:
            sig += f" (result {' '.join(results)})"
        lines.append(f'  (import "{ABI_NAMESPACE}" "{name}" (func ${name}{sig}))')
    return "\n".join(lines)


def runtime_wat() -> str:
    return RUNTIME_WAT.format(**LAYOUT)
