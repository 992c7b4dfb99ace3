"""
Protocol-routine dispatch for the mock host.

Wraps a PluginEngine with the per-frame steps of the sending pipeline
(ShouldSendFrame, PrepareFrame, FrameWireLen, WriteFrame, OnFrameReserved,
NotifyFrame), the receiving side (ParseFrame, ProcessFrame), LogFrame and the
transport-parameter routines. Native code paths stay observable through the
Before / After anchors. A failing plugin never escapes: it is detached by the
engine and the call reports "no result".
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

from src.common import frames as fr
from src.common.codec import decode_tp_tlv
from src.common.errors import DecodeError, NotAvailable, RoutineAborted, StatusCode
from src.common.routines import Anchor, RoutineId, RoutineKind
from src.common.values import PluginVal, TP_VALUE_MAX, TransportParameter, ValKind
from src.engine.engine import PluginEngine, RoutineResult

logger = logging.getLogger(__name__)

HALT = object()
TP_CAP = TP_VALUE_MAX + 16


def routine(kind: RoutineKind, param: int) -> RoutineId:
    return RoutineId(kind, param)


class RoutineDispatcher:
    def __init__(self, engine: PluginEngine):
        self.engine = engine
        self.contract_breaches = 0

    def _call(self, rid: RoutineId, inputs: Sequence[PluginVal] = ()) -> Optional[RoutineResult]:
        try:
            return self.engine.call_routine(rid, inputs)
        except NotAvailable:
            return None
        except RoutineAborted as e:
            logger.warning(f"{rid} aborted: {e}")
            return None

    def provides(self, kind: RoutineKind, param: int) -> bool:
        return self.engine.provides(RoutineId(kind, param))

    # ------------------------------------------------------------------
    # Sending
    # ------------------------------------------------------------------

    def should_send(self, frame_type: int) -> bool:
        result = self._call(routine(RoutineKind.SHOULD_SEND_FRAME, frame_type))
        if result is None or not result.ok or not result.outputs:
            return False
        value = result.outputs[0]
        return value.kind == ValKind.BOOL and value.value

    def prepare(self, frame_type: int):
        """
        Returns:
            The prepared frame, HALT when the plugin stops the batch, or None
        """
        result = self._call(routine(RoutineKind.PREPARE_FRAME, frame_type))
        if result is None:
            return None
        if result.status == StatusCode.HALT_SENDING:
            return HALT
        if not result.ok or not result.outputs or result.outputs[0].kind != ValKind.QUIC_FRAME:
            return None
        frame = result.outputs[0].value
        if frame.frame_type != frame_type and not (
                frame_type == fr.STREAM_BASE and isinstance(frame, fr.Stream)):
            logger.warning(f"PrepareFrame(0x{frame_type:x}) produced a frame of type 0x{frame.frame_type:x}")
            return None
        return frame

    def wire_len(self, frame_type: int, frame) -> Optional[int]:
        rid = routine(RoutineKind.FRAME_WIRE_LEN, frame_type)
        if self.engine.provides(rid):
            result = self._call(rid, [PluginVal.frame(frame)])
            if result is None or not result.ok or not result.outputs:
                return None
            value = result.outputs[0]
            return value.value if value.kind == ValKind.USIZE else None
        if isinstance(frame, fr.Extension):
            return None
        return fr.frame_wire_len(frame)

    def write(self, frame_type: int, frame, wire_len: int) -> Optional[bytes]:
        """
        Produce the wire image of a plugin frame.

        A plugin writing a different number of octets than it announced is
        detached and the frame dropped.
        """
        rid = routine(RoutineKind.WRITE_FRAME, frame_type)
        if not self.engine.provides(rid):
            if isinstance(frame, fr.Extension):
                return None
            return self.native_write(frame)
        owner = self.engine.define_owner(rid)
        buffer = bytearray(wire_len)
        cap = self.engine.bytes_expose(buffer, 0, wire_len)
        result = self._call(rid, [PluginVal.frame(frame), PluginVal.bytes_cap(cap)])
        if result is None or not result.ok:
            return None
        written = result.written.get(cap.tag, 0)
        if written != wire_len:
            self.contract_breaches += 1
            logger.warning(f"WriteFrame(0x{frame_type:x}) wrote {written} of {wire_len} octets")
            if owner:
                self.engine.detach(owner, f"WriteFrame(0x{frame_type:x}) length mismatch")
            return None
        return bytes(buffer)

    def on_reserved(self, frame_type: int, frame, pkt_num: int) -> None:
        rid = routine(RoutineKind.ON_FRAME_RESERVED, frame_type)
        if self.engine.provides(rid):
            self._call(rid, [PluginVal.frame(frame), PluginVal.u64(pkt_num)])

    def notify(self, frame_type: int, frame, acknowledged: bool) -> None:
        rid = routine(RoutineKind.NOTIFY_FRAME, frame_type)
        if self.engine.provides(rid):
            self._call(rid, [PluginVal.frame(frame), PluginVal.boolean(acknowledged)])

    def native_write(self, frame, stream_data: Optional[bytes] = None) -> bytes:
        """
        Wire image of a core frame.

        A Define hook on WriteFrame gets a writable capability of exactly
        the native length (and, for STREAM, a read-only one over the
        payload). Without one, or when it breaks the length contract, the
        native image is used, observable through Before / After hooks.
        """
        rid = routine(RoutineKind.WRITE_FRAME, frame.frame_type)
        if self.engine.provides(rid):
            image = self._defined_write(rid, frame, stream_data)
            if image is not None:
                return image
        observed = self.engine.has_observers(rid)
        if observed:
            self.engine.observe(rid, Anchor.BEFORE, [PluginVal.frame(frame)])
        image = fr.frame_wire(frame, stream_data)
        if observed:
            cap = self.engine.bytes_expose(bytearray(image), len(image), 0)
            self.engine.observe(rid, Anchor.AFTER, [PluginVal.frame(frame), PluginVal.bytes_cap(cap)])
        return image

    def _defined_write(self, rid: RoutineId, frame, stream_data: Optional[bytes]) -> Optional[bytes]:
        owner = self.engine.define_owner(rid)
        wire_len = fr.frame_wire_len(frame)
        buffer = bytearray(wire_len)
        inputs = [PluginVal.frame(frame), PluginVal.bytes_cap(self.engine.bytes_expose(buffer, 0, wire_len))]
        if isinstance(frame, fr.Stream):
            payload = bytearray(stream_data if stream_data is not None else bytes(frame.length))
            inputs.append(PluginVal.bytes_cap(self.engine.bytes_expose(payload, len(payload), 0)))
        result = self._call(rid, inputs)
        if result is None or not result.ok:
            return None
        written = result.written.get(inputs[1].value.tag, 0)
        if written != wire_len:
            self.contract_breaches += 1
            logger.warning(f"WriteFrame(0x{frame.frame_type:x}) wrote {written} of {wire_len} octets")
            if owner:
                self.engine.detach(owner, f"WriteFrame(0x{frame.frame_type:x}) length mismatch")
            return None
        return bytes(buffer)

    # ------------------------------------------------------------------
    # Receiving
    # ------------------------------------------------------------------

    def parse(self, frame_type: int, data: bytes, offset: int) -> Optional[Tuple[object, int]]:
        """
        Hand the rest of the packet to the plugin parser of `frame_type`.

        Returns:
            (frame, consumed), or None when no plugin parses this type

        Raises:
            DecodeError: The plugin parser failed or reported a bad length
        """
        rid = routine(RoutineKind.PARSE_FRAME, frame_type)
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

    def process(self, frame, now: int, native: Callable[[object], None]) -> None:
        """ProcessFrame: plugin Define when present, else `native` between Before and After hooks."""
        rid = routine(RoutineKind.PROCESS_FRAME, frame.frame_type)
        inputs = [PluginVal.frame(frame), PluginVal.instant(now)]
        if self.engine.provides(rid):
            result = self._call(rid, inputs)
            if result is not None or isinstance(frame, fr.Extension):
                return
        observed = self.engine.has_observers(rid)
        if observed:
            self.engine.observe(rid, Anchor.BEFORE, inputs)
        native(frame)
        if observed:
            self.engine.observe(rid, Anchor.AFTER, inputs)

    # ------------------------------------------------------------------
    # Logging
    # ------------------------------------------------------------------

    def log_frame(self, frame) -> str:
        rid = routine(RoutineKind.LOG_FRAME, frame.frame_type)
        if self.engine.provides(rid):
            result = self._call(rid, [PluginVal.frame(frame)])
            if result is not None and result.ok and result.outputs \
                    and result.outputs[0].kind == ValKind.RAW_BUFFER:
                return result.outputs[0].value.decode("utf-8", errors="replace")
        return fr.native_log_text(frame)

    # ------------------------------------------------------------------
    # Transport parameters
    # ------------------------------------------------------------------

    def write_transport_parameters(self, tp_types: Sequence[int]) -> List[TransportParameter]:
        """Ask each plugin TP type for its TLV; malformed or mismatched output is skipped."""
        params = []
        for tp_type in tp_types:
            rid = routine(RoutineKind.WRITE_TRANSPORT_PARAMETER, tp_type)
            if not self.engine.provides(rid):
                continue
            buffer = bytearray(TP_CAP)
            cap = self.engine.bytes_expose(buffer, 0, TP_CAP)
            result = self._call(rid, [PluginVal.bytes_cap(cap)])
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

    def decode_transport_parameter(self, tp: TransportParameter) -> bool:
        """Dispatch a received TP to its plugin; False when nobody registered the type."""
        rid = routine(RoutineKind.DECODE_TRANSPORT_PARAMETER, tp.param_type)
        if not self.engine.provides(rid):
            return False
        self._call(rid, [PluginVal.transport_param(tp)])
        return True

