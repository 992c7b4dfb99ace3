"""
Routine bridge for the beta backend.

Every protocol routine beta runs goes through one RoutineBridge: the
registration steps the scheduler plans with, the WriteFrame calls the
serializer renders with, and the parse / process / notify / transport
parameter steps of the receive path. A plugin that fails is detached by the
engine and the bridge reports "no result".
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

from src.common import frames as fr
from src.common.codec import decode_tp_tlv
from src.common.errors import DecodeError, NotAvailable, RoutineAborted, StatusCode
from src.common.routines import Anchor, RoutineId, RoutineKind
from src.common.values import PluginVal, TP_VALUE_MAX, TransportParameter, ValKind
from src.engine.engine import PluginEngine, RoutineResult

logger = logging.getLogger(__name__)

TP_CAP = TP_VALUE_MAX + 16


class Halt:
    """PrepareFrame asked the host to stop sending for now."""


HALT = Halt()


@dataclass(frozen=True)
class Offer:
    """A registration's frame for the next packet; wire_len 0 is a fill request."""
    frame_type: int
    frame: object
    wire_len: int

    @property
    def is_fill(self) -> bool:
        return self.wire_len == 0


class RoutineBridge:
    def __init__(self, engine: PluginEngine):
        self.engine = engine
        self.contract_breaches = 0

    def invoke(self, kind: RoutineKind, param: int,
               inputs: Sequence[PluginVal] = ()) -> Optional[RoutineResult]:
        rid = RoutineId(kind, param)
        try:
            return self.engine.call_routine(rid, inputs)
        except NotAvailable:
            return None
        except RoutineAborted as e:
            logger.warning(f"{rid} aborted: {e}")
            return None

    def defined(self, kind: RoutineKind, param: int) -> bool:
        return self.engine.provides(RoutineId(kind, param))

    def _length_breach(self, rid: RoutineId, owner: Optional[str], written: int, expected: int) -> None:
        self.contract_breaches += 1
        logger.warning(f"{rid} wrote {written} of {expected} octets")
        if owner:
            self.engine.detach(owner, f"{rid} length mismatch")

    # ------------------------------------------------------------------
    # Planning
    # ------------------------------------------------------------------

    def offer(self, frame_type: int, room: int):
        """
        ShouldSendFrame, PrepareFrame and FrameWireLen for one registration.

        Returns:
            Offer, HALT, or None when the registration has nothing that fits
        """
        if not self._wants(frame_type):
            return None
        prepared = self._prepare(frame_type)
        if prepared is None or prepared is HALT:
            return prepared
        if isinstance(prepared, fr.Padding) and prepared.length == 0:
            return Offer(frame_type, prepared, 0)
        wire_len = self._measure(frame_type, prepared)
        if wire_len is None or wire_len <= 0 or wire_len > room:
            logger.debug(f"Frame 0x{frame_type:x} of {wire_len} octets does not fit {room}")
            return None
        return Offer(frame_type, prepared, wire_len)

    def _wants(self, frame_type: int) -> bool:
        result = self.invoke(RoutineKind.SHOULD_SEND_FRAME, frame_type)
        if result is None or not result.ok or not result.outputs:
            return False
        value = result.outputs[0]
        return value.kind == ValKind.BOOL and bool(value.value)

    def _prepare(self, frame_type: int):
        result = self.invoke(RoutineKind.PREPARE_FRAME, frame_type)
        if result is None:
            return None
        if result.status == StatusCode.HALT_SENDING:
            return HALT
        if not result.ok or not result.outputs or result.outputs[0].kind != ValKind.QUIC_FRAME:
            return None
        frame = result.outputs[0].value
        stream_for_stream = frame_type == fr.STREAM_BASE and isinstance(frame, fr.Stream)
        if frame.frame_type != frame_type and not stream_for_stream:
            logger.warning(f"PrepareFrame(0x{frame_type:x}) produced a frame of type 0x{frame.frame_type:x}")
            return None
        return frame

    def _measure(self, frame_type: int, frame) -> Optional[int]:
        if self.defined(RoutineKind.FRAME_WIRE_LEN, frame_type):
            result = self.invoke(RoutineKind.FRAME_WIRE_LEN, frame_type, [PluginVal.frame(frame)])
            if result is None or not result.ok or not result.outputs:
                return None
            value = result.outputs[0]
            return value.value if value.kind == ValKind.USIZE else None
        if isinstance(frame, fr.Extension):
            return None
        return fr.frame_wire_len(frame)

    # ------------------------------------------------------------------
    # Rendering
    # ------------------------------------------------------------------

    def render_offer(self, frame_type: int, frame, wire_len: int) -> Optional[bytes]:
        """WriteFrame for a registered type; None drops the frame from the packet."""
        rid = RoutineId(RoutineKind.WRITE_FRAME, frame_type)
        if not self.engine.provides(rid):
            if isinstance(frame, fr.Extension):
                return None
            return self.render_core(frame)
        return self._write_through(rid, [PluginVal.frame(frame)], wire_len)

    def render_core(self, frame, payload: Optional[bytes] = None) -> bytes:
        """
        WriteFrame for a core frame. A Define hook writes through a
        capability of exactly the native length, STREAM also gets its
        payload read-only; otherwise the native image is written between
        Before and After hooks.
        """
        rid = RoutineId(RoutineKind.WRITE_FRAME, frame.frame_type)
        if self.engine.provides(rid):
            extra = []
            if isinstance(frame, fr.Stream):
                data = bytearray(payload if payload is not None else bytes(frame.length))
                extra.append(PluginVal.bytes_cap(self.engine.bytes_expose(data, len(data), 0)))
            image = self._write_through(rid, [PluginVal.frame(frame)], fr.frame_wire_len(frame), extra)
            if image is not None:
                return image
        observed = self.engine.has_observers(rid)
        if observed:
            self.engine.observe(rid, Anchor.BEFORE, [PluginVal.frame(frame)])
        image = fr.frame_wire(frame, payload)
        if observed:
            cap = self.engine.bytes_expose(bytearray(image), len(image), 0)
            self.engine.observe(rid, Anchor.AFTER, [PluginVal.frame(frame), PluginVal.bytes_cap(cap)])
        return image

    def _write_through(self, rid: RoutineId, head: List[PluginVal], wire_len: int,
                       extra: Sequence[PluginVal] = ()) -> Optional[bytes]:
        owner = self.engine.define_owner(rid)
        buffer = bytearray(wire_len)
        cap = self.engine.bytes_expose(buffer, 0, wire_len)
        result = self.invoke(rid.kind, rid.param, [*head, PluginVal.bytes_cap(cap), *extra])
        if result is None or not result.ok:
            return None
        written = result.written.get(cap.tag, 0)
        if written != wire_len:
            self._length_breach(rid, owner, written, wire_len)
            return None
        return bytes(buffer)

    def reserved(self, frame_type: int, frame, pkt_num: int) -> None:
        if self.defined(RoutineKind.ON_FRAME_RESERVED, frame_type):
            self.invoke(RoutineKind.ON_FRAME_RESERVED, frame_type, [PluginVal.frame(frame), PluginVal.u64(pkt_num)])

    def notify(self, frame_type: int, frame, acknowledged: bool) -> None:
        if self.defined(RoutineKind.NOTIFY_FRAME, frame_type):
            self.invoke(RoutineKind.NOTIFY_FRAME, frame_type,
                        [PluginVal.frame(frame), PluginVal.boolean(acknowledged)])

    # ------------------------------------------------------------------
    # Receive path
    # ------------------------------------------------------------------

    def parse(self, frame_type: int, data: bytes, offset: int) -> Optional[Tuple[object, int]]:
        """
        Returns:
            (frame, consumed), or None when no plugin parses this type

        Raises:
            DecodeError: The plugin parser failed or reported a bad length
        """
        rid = RoutineId(RoutineKind.PARSE_FRAME, frame_type)
        if not self.engine.provides(rid):
            return None
        remaining = len(data) - offset
        cap = self.engine.bytes_expose(bytearray(data[offset:]), remaining, 0)
        try:
            result = self.engine.call_routine(rid, [PluginVal.bytes_cap(cap)])
        except (NotAvailable, RoutineAborted) as e:
            raise DecodeError(f"ParseFrame(0x{frame_type:x}) failed: {e}") from e
        if not result.ok or len(result.outputs) < 2:
            raise DecodeError(f"ParseFrame(0x{frame_type:x}) returned status {result.status}")
        frame, consumed = result.outputs[0], result.outputs[1]
        if frame.kind != ValKind.QUIC_FRAME or consumed.kind != ValKind.USIZE:
            raise DecodeError(f"ParseFrame(0x{frame_type:x}) produced {frame!r}, {consumed!r}")
        if not 0 < consumed.value <= remaining:
            raise DecodeError(f"ParseFrame(0x{frame_type:x}) consumed {consumed.value} of {remaining}")
        return frame.value, consumed.value

    def process(self, frame, now: int, native: Callable[[], None]) -> None:
        rid = RoutineId(RoutineKind.PROCESS_FRAME, frame.frame_type)
        inputs = [PluginVal.frame(frame), PluginVal.instant(now)]
        if self.engine.provides(rid):
            if self.invoke(rid.kind, rid.param, inputs) is not None or isinstance(frame, fr.Extension):
                return
        observed = self.engine.has_observers(rid)
        if observed:
            self.engine.observe(rid, Anchor.BEFORE, inputs)
        native()
        if observed:
            self.engine.observe(rid, Anchor.AFTER, inputs)

    def describe(self, frame) -> str:
        if self.defined(RoutineKind.LOG_FRAME, frame.frame_type):
            result = self.invoke(RoutineKind.LOG_FRAME, frame.frame_type, [PluginVal.frame(frame)])
            if result is not None and result.ok and result.outputs \
                    and result.outputs[0].kind == ValKind.RAW_BUFFER:
                return result.outputs[0].value.decode("utf-8", errors="replace")
        return fr.native_log_text(frame)

    # ------------------------------------------------------------------
    # Transport parameters
    # ------------------------------------------------------------------

    def plugin_parameters(self) -> List[TransportParameter]:
        """TLVs of every registered plugin TP type, in registration order."""
        params = []
        for tp_type in dict.fromkeys(t for t, _ in self.engine.registrations().tp_types):
            if not self.defined(RoutineKind.WRITE_TRANSPORT_PARAMETER, tp_type):
                continue
            buffer = bytearray(TP_CAP)
            cap = self.engine.bytes_expose(buffer, 0, TP_CAP)
            result = self.invoke(RoutineKind.WRITE_TRANSPORT_PARAMETER, tp_type, [PluginVal.bytes_cap(cap)])
            if result is None or not result.ok:
                logger.warning(f"WriteTransportParameter(0x{tp_type:x}) failed")
                continue
            written = result.written.get(cap.tag, 0)
            try:
                tp, used = decode_tp_tlv(bytes(buffer[:written]))
            except DecodeError as e:
                logger.warning(f"WriteTransportParameter(0x{tp_type:x}) wrote a malformed TLV: {e}")
                continue
            if used != written or tp.param_type != tp_type:
                logger.warning(f"WriteTransportParameter(0x{tp_type:x}) wrote type 0x{tp.param_type:x}")
                continue
            params.append(tp)
        return params

    def accept_parameter(self, tp: TransportParameter) -> bool:
        """False when no plugin registered the type."""
        if not self.defined(RoutineKind.DECODE_TRANSPORT_PARAMETER, tp.param_type):
            return False
        self.invoke(RoutineKind.DECODE_TRANSPORT_PARAMETER, tp.param_type, [PluginVal.transport_param(tp)])
        return True
