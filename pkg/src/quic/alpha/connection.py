"""
Alpha backend: one connection object that writes frames into the packet
buffer as they are scheduled.

Routines are invoked inline on the send and receive paths. Fields are served
from a getter/setter map built once per connection.
"""

import logging
from collections import deque
from pathlib import Path
from typing import Callable, Deque, Dict, FrozenSet, List, Optional, Sequence, Tuple

from src.common import frames as fr
from src.common.codec import decode_tp_list, decode_tp_tlv, encode_tp_list, tp_int, tp_int_value
from src.common.endpoint import (
    NATIVE_TP_TYPES,
    TP_IDLE_TIMEOUT,
    TP_INITIAL_MAX_DATA,
    TP_MAX_ACK_DELAY,
    Role,
    default_addresses,
)
from src.common.errors import (
    DecodeError,
    NotAvailable,
    RoutineAborted,
    StatusCode,
    TransportError,
    TransportErrorCode,
)
from src.common.fields import ALL_FIELDS, ConnectionField as F
from src.common.recovery import MS, LossDetector, NewReno, Pacer, RttEstimator, SentFrame, SentPacket
from src.common.routines import Anchor, RoutineId, RoutineKind
from src.common.streams import STREAM_ID, RangeSet, RecvStream, SendStream
from src.common.values import PluginVal, SocketAddr, TP_VALUE_MAX, TransportParameter, ValKind
from src.common.varint import varint_len
from src.common.wire import Packet, PacketKind, decode_header, encode_header
from src.config import config
from src.engine.contract import check_field_value
from src.engine.engine import PluginEngine, RoutineResult
from src.engine.permissions import PermissionSet
from src.engine.plugin import PluginHandle

logger = logging.getLogger(__name__)

# PrepareFrame stopped the batch
HALT = object()
MAX_BATCH = 256
MIN_STREAM_ROOM = 5
TP_CAP = TP_VALUE_MAX + 16
PADDING = fr.Padding.frame_type


class AlphaConnection:
    """
    One endpoint driven by an external event loop: `receive_packet`,
    `handle_timeout` and `send_packets` in turn order.

    Args:
        role: "client" or "server"
        local_addr / peer_addr: Addresses reported through the address fields
        mtu: Maximum packet size in octets
        seed: Seed for the plugin-visible random generator
        sandbox_root: Parent directory of this endpoint's plugin sandboxes
        supported_fields: Fields this host exposes to plugins (default: all)
        keep_stream_data: Keep received stream octets for inspection
    """

    backend = "alpha"

    def __init__(self, role, local_addr: Optional[str] = None, peer_addr: Optional[str] = None,
                 mtu: Optional[int] = None, seed: int = 0, sandbox_root: Optional[Path] = None,
                 supported_fields: Optional[FrozenSet[F]] = None, keep_stream_data: bool = False):
        settings = config.transport
        recovery = config.recovery
        self.role = Role(role)
        own, other = default_addresses(self.role)
        self.local_addr = SocketAddr.parse(local_addr or own)
        self.peer_addr = SocketAddr.parse(peer_addr or other)
        self.mtu = mtu or settings['mtu']
        self.initial_packet_size = settings['initial_packet_size']
        self.ack_threshold = settings['ack_eliciting_threshold']
        self.max_ack_ranges = settings['max_ack_ranges']
        self.max_ack_delay = settings['max_ack_delay_ms'] * MS
        self.idle_timeout = settings['idle_timeout_ms'] * MS
        self._supported = frozenset(supported_fields) if supported_fields is not None else ALL_FIELDS
        self._now = 0

        # max_rx_data is what we advertise, max_tx_data what the peer allows
        self.max_rx_data = settings['initial_max_data']
        self.max_tx_data = 0
        self._max_data_resend = False

        self.rtt = RttEstimator(recovery['initial_rtt_ms'] * MS, recovery['granularity_ms'] * MS)
        self.cc = NewReno(self.mtu)
        self.pacer = Pacer(self.mtu)
        self.loss = LossDetector(self.rtt, self.max_ack_delay)
        self.pacer.update_rate(self.cc.cwnd, self.rtt.smoothed)
        self._pacing_blocked = False
        self._pto_owed = 0

        # one packet number space for Initial and OneRtt
        self.next_pkt_num = 0
        self.largest_rx_pkt_num: Optional[int] = None
        self.received = RangeSet()
        self._largest_rx_time = 0
        self._ack_pending = False
        self._ack_due = False
        self._unacked_eliciting = 0
        self._ack_deadline: Optional[int] = None

        self.established = False
        self.closed = False
        self.close_code: Optional[int] = None
        self._close_pending = False
        self._close_reason = b""
        self._crypto_message = b""
        self._crypto_pending = False
        self._peer_params: Optional[List[TransportParameter]] = None
        self._last_activity = 0

        self.send_stream = SendStream()
        self.recv_stream = RecvStream(keep_data=keep_stream_data)
        self._path_responses: Deque[fr.PathResponse] = deque()

        self.stats = {
            "packets_sent": 0,
            "packets_received": 0,
            "octets_sent": 0,
            "retransmissions": 0,
            "retransmitted_octets": 0,
        }
        self.contract_breaches = 0

        self.engine = PluginEngine(self, clock=lambda: self._now, seed=seed, sandbox_root=sandbox_root)
        self._getters: Dict[F, Callable[[], PluginVal]] = {
            F.IS_SERVER: lambda: PluginVal.boolean(self.is_server),
            F.MAX_TX_DATA: lambda: PluginVal.u64(self.max_tx_data),
            F.TX_DATA: lambda: PluginVal.u64(self.send_stream.next_offset),
            F.MAX_RX_DATA: lambda: PluginVal.u64(self.max_rx_data),
            F.RX_DATA: lambda: PluginVal.u64(self.recv_stream.highest),
            F.MTU: lambda: PluginVal.usize(self.mtu),
            F.PEER_ADDR: lambda: PluginVal.socket_addr(self.peer_addr),
            F.LOCAL_ADDR: lambda: PluginVal.socket_addr(self.local_addr),
            F.IS_ESTABLISHED: lambda: PluginVal.boolean(self.established),
            F.IDLE_TIMEOUT: lambda: PluginVal.duration(self.idle_timeout),
            F.NEXT_PKT_NUM: lambda: PluginVal.u64(self.next_pkt_num),
            F.LARGEST_RX_PKT_NUM: lambda: PluginVal.u64(self.largest_rx_pkt_num or 0),
            F.ACK_ELICITING_IN_FLIGHT: lambda: PluginVal.u64(self.loss.ack_eliciting_in_flight),
            F.CWND: lambda: PluginVal.u64(self.cc.cwnd),
            F.SSTHRESH: lambda: PluginVal.u64(self.cc.ssthresh),
            F.BYTES_IN_FLIGHT: lambda: PluginVal.u64(self.cc.bytes_in_flight),
            F.SMOOTHED_RTT: lambda: PluginVal.duration(self.rtt.smoothed),
            F.RTT_VAR: lambda: PluginVal.duration(self.rtt.var),
            F.MIN_RTT: lambda: PluginVal.duration(self.rtt.min),
            F.LATEST_RTT: lambda: PluginVal.duration(self.rtt.latest),
            F.LOSS_COUNT: lambda: PluginVal.u64(self.loss.loss_count),
            F.PACING_RATE: lambda: PluginVal.u64(self.pacer.rate),
            F.IN_SLOW_START: lambda: PluginVal.boolean(self.cc.in_slow_start),
        }
        self._setters: Dict[F, Callable] = {
            F.CWND: self._set_cwnd,
            F.SSTHRESH: self._set_ssthresh,
            F.IN_SLOW_START: self.cc.set_slow_start,
            F.PACING_RATE: self._set_pacing_rate,
            F.MAX_TX_DATA: self._set_max_tx_data,
            F.MAX_RX_DATA: self._set_max_rx_data,
            F.IDLE_TIMEOUT: self._set_idle_timeout,
        }

    def __repr__(self) -> str:
        return f"<AlphaConnection {self.role.value} {self.local_addr}>"

    @property
    def is_server(self) -> bool:
        return self.role == Role.SERVER

    @property
    def now(self) -> int:
        return self._now

    @property
    def cwnd(self) -> int:
        return self.cc.cwnd

    def _enter(self, now: int) -> None:
        if now > self._now:
            self._now = now

    # ------------------------------------------------------------------
    # Host contract
    # ------------------------------------------------------------------

    def supported_fields(self) -> FrozenSet[F]:
        return self._supported

    def get_field(self, fld: F) -> PluginVal:
        if fld not in self._supported:
            raise KeyError(f"{fld.name} is not supported by this host")
        return self._getters[fld]()

    def set_field(self, fld: F, value: PluginVal) -> None:
        if fld not in self._supported:
            raise KeyError(f"{fld.name} is not supported by this host")
        setter = self._setters.get(fld)
        if setter is None:
            raise PermissionError(f"{fld.name} is read-only")
        check_field_value(fld, value)
        setter(value.value)

    def _set_cwnd(self, value: int) -> None:
        self.cc.set_cwnd(value)
        self.pacer.update_rate(self.cc.cwnd, self.rtt.smoothed)

    def _set_ssthresh(self, value: int) -> None:
        self.cc.ssthresh = value

    def _set_pacing_rate(self, value: int) -> None:
        self.pacer.override = value or None
        self.pacer.update_rate(self.cc.cwnd, self.rtt.smoothed)

    def _set_max_tx_data(self, value: int) -> None:
        self.max_tx_data = value

    def _set_max_rx_data(self, value: int) -> None:
        if value < self.recv_stream.highest:
            raise ValueError(f"MAX_RX_DATA {value} below data already received")
        self.max_rx_data = value

    def _set_idle_timeout(self, value: int) -> None:
        self.idle_timeout = value

    # ------------------------------------------------------------------
    # Plugins
    # ------------------------------------------------------------------

    def load_plugin(self, bytecode: bytes, permissions: PermissionSet,
                    name: Optional[str] = None) -> PluginHandle:
        """Load a plugin into this connection's engine; raises LoadRejected."""
        return self.engine.load_plugin(bytecode, permissions, name)

    def plugin_control(self, plugin_id: str, op: int,
                       args: Sequence[PluginVal] = ()) -> RoutineResult:
        return self.engine.plugin_control(plugin_id, op, args)

    def _run(self, kind: RoutineKind, param: int, inputs: Sequence[PluginVal] = ()) -> Optional[RoutineResult]:
        """Call a routine; a missing or aborted plugin yields None."""
        rid = RoutineId(kind, param)
        try:
            return self.engine.call_routine(rid, inputs)
        except NotAvailable:
            return None
        except RoutineAborted as e:
            logger.warning(f"{rid} aborted: {e}")
            return None

    def _defines(self, kind: RoutineKind, param: int) -> bool:
        return self.engine.provides(RoutineId(kind, param))

    def _breach(self, rid: RoutineId, owner: Optional[str], written: int, expected: int) -> None:
        self.contract_breaches += 1
        logger.warning(f"{rid} wrote {written} of {expected} octets")
        if owner:
            self.engine.detach(owner, f"{rid} length mismatch")

    def log_frame(self, frame) -> str:
        if self._defines(RoutineKind.LOG_FRAME, frame.frame_type):
            result = self._run(RoutineKind.LOG_FRAME, frame.frame_type, [PluginVal.frame(frame)])
            if result is not None and result.ok and result.outputs \
                    and result.outputs[0].kind == ValKind.RAW_BUFFER:
                return result.outputs[0].value.decode("utf-8", errors="replace")
        return fr.native_log_text(frame)

    # ------------------------------------------------------------------
    # Application interface
    # ------------------------------------------------------------------

    def send_stream_data(self, data: Optional[bytes] = None, length: Optional[int] = None,
                         fin: bool = True) -> None:
        """Queue the body of stream 0: explicit octets or `length` pattern octets."""
        self.send_stream.write(data, length, fin)

    @property
    def transfer_complete(self) -> bool:
        return self.recv_stream.complete

    @property
    def send_complete(self) -> bool:
        return self.send_stream.all_acked

    @property
    def closing(self) -> bool:
        """Closed locally with the CONNECTION_CLOSE not yet sent."""
        return self._close_pending

    def frames_in_flight(self) -> List[int]:
        """Frame types carried by packets neither acknowledged nor declared lost."""
        return [sent.frame.frame_type for packet in self.loss.in_flight_packets() for sent in packet.frames]

    def close(self, code: int = TransportErrorCode.NO_ERROR, reason: bytes = b"") -> None:
        if self.closed:
            return
        self.closed = True
        self.close_code = int(code)
        self._close_reason = bytes(reason)[:fr.MAX_CLOSE_REASON]
        self._close_pending = True
        logger.info(f"{self.role.value} closing: code=0x{int(code):x} {self._close_reason!r}")

    def shutdown(self) -> None:
        self.engine.close()

    # ------------------------------------------------------------------
    # Handshake
    # ------------------------------------------------------------------

    def connect(self, now: int) -> None:
        """Client side: queue the first Initial carrying our transport parameters."""
        self._enter(now)
        if self.is_server:
            raise ValueError("only a client connects")
        self._last_activity = now
        self._crypto_message = self._transport_parameters()
        self._crypto_pending = True
        logger.info(f"{self.role.value} (alpha) connecting to {self.peer_addr}")

    def _transport_parameters(self) -> bytes:
        params = [
            TransportParameter(TP_INITIAL_MAX_DATA, tp_int(self.max_rx_data)),
            TransportParameter(TP_IDLE_TIMEOUT, tp_int(self.idle_timeout // MS)),
            TransportParameter(TP_MAX_ACK_DELAY, tp_int(self.max_ack_delay // MS)),
        ]
        for tp_type in dict.fromkeys(t for t, _ in self.engine.registrations().tp_types):
            tp = self._plugin_transport_parameter(tp_type)
            if tp is not None:
                params.append(tp)
        return encode_tp_list(params)

    def _plugin_transport_parameter(self, tp_type: int) -> Optional[TransportParameter]:
        if not self._defines(RoutineKind.WRITE_TRANSPORT_PARAMETER, tp_type):
            return None
        buffer = bytearray(TP_CAP)
        cap = self.engine.bytes_expose(buffer, 0, TP_CAP)
        result = self._run(RoutineKind.WRITE_TRANSPORT_PARAMETER, tp_type, [PluginVal.bytes_cap(cap)])
        if result is None or not result.ok:
            logger.warning(f"WriteTransportParameter(0x{tp_type:x}) failed")
            return None
        written = result.written.get(cap.tag, 0)
        try:
            tp, used = decode_tp_tlv(bytes(buffer[:written]))
        except DecodeError as e:
            logger.warning(f"WriteTransportParameter(0x{tp_type:x}) wrote a malformed TLV: {e}")
            return None
        if used != written or tp.param_type != tp_type:
            logger.warning(f"WriteTransportParameter(0x{tp_type:x}) wrote type 0x{tp.param_type:x}")
            return None
        return tp

    def _accept_transport_parameters(self, message: bytes) -> None:
        """
        Raises:
            TransportError: TRANSPORT_PARAMETER_ERROR on a malformed list
        """
        try:
            params = decode_tp_list(message)
            for tp in params:
                if tp.param_type == TP_INITIAL_MAX_DATA:
                    self.max_tx_data = max(self.max_tx_data, tp_int_value(tp))
                elif tp.param_type == TP_IDLE_TIMEOUT:
                    peer_idle = tp_int_value(tp) * MS
                    if peer_idle:
                        self.idle_timeout = min(self.idle_timeout, peer_idle)
                elif tp.param_type == TP_MAX_ACK_DELAY:
                    self.loss.max_ack_delay = tp_int_value(tp) * MS
        except DecodeError as e:
            raise TransportError(TransportErrorCode.TRANSPORT_PARAMETER_ERROR, str(e)) from e
        self._peer_params = params
        for tp in params:
            if tp.param_type in NATIVE_TP_TYPES:
                continue
            if self._defines(RoutineKind.DECODE_TRANSPORT_PARAMETER, tp.param_type):
                self._run(RoutineKind.DECODE_TRANSPORT_PARAMETER, tp.param_type, [PluginVal.transport_param(tp)])
            else:
                logger.debug(f"Ignoring transport parameter 0x{tp.param_type:x}")

    def _on_crypto(self, frame: fr.Crypto) -> None:
        if self.is_server:
            if self._peer_params is not None:
                # the client did not get our reply yet
                self._crypto_pending = True
                return
            self._accept_transport_parameters(frame.data)
            self._crypto_message = self._transport_parameters()
            self._crypto_pending = True
            return
        if self.established:
            return
        self._accept_transport_parameters(frame.data)
        self._crypto_pending = False
        self._set_established()

    def _set_established(self) -> None:
        self.established = True
        logger.info(f"{self.role.value} (alpha) handshake complete at t={self._now}us, "
                    f"peer max_data={self.max_tx_data}")

    # ------------------------------------------------------------------
    # Receiving
    # ------------------------------------------------------------------

    def receive_packet(self, data: bytes, now: int) -> None:
        self._enter(now)
        if self.closed:
            return
        try:
            kind, pkt_num, offset = decode_header(data)
        except DecodeError as e:
            logger.debug(f"{self.role.value} dropping undecodable packet: {e}")
            return
        if kind == PacketKind.ONE_RTT and not self.established:
            logger.debug(f"{self.role.value} dropping OneRtt packet {pkt_num} before handshake")
            return
        if pkt_num in self.received:
            logger.debug(f"{self.role.value} duplicate packet {pkt_num}")
            return
        self.stats["packets_received"] += 1
        self._last_activity = now
        try:
            frames = self._read_frames(data, offset)
            for frame, payload in frames:
                if logger.isEnabledFor(logging.DEBUG):
                    logger.debug(f"{self.role.value} rx pn={pkt_num} {self.log_frame(frame)}")
                self._process(frame, payload, now)
                if self.closed:
                    return
        except TransportError as e:
            logger.warning(f"{self.role.value} connection error {e.code.name}: {e.reason}")
            self.close(e.code, e.reason.encode()[:fr.MAX_CLOSE_REASON])
            return
        self._on_packet_received(kind, pkt_num, now, any(fr.is_ack_eliciting(f) for f, _ in frames))

    def _read_frames(self, data: bytes, offset: int) -> List[Tuple[object, bytes]]:
        """Every (frame, stream payload) pair of a packet; payload is empty except for STREAM."""
        frames = []
        while offset < len(data):
            try:
                frame_type = fr.peek_frame_type(data, offset)
                parsed = self._plugin_parse(frame_type, data, offset)
                if parsed is None:
                    if frame_type > fr.CORE_FRAME_TYPE_MAX:
                        raise DecodeError(f"unknown frame type 0x{frame_type:x}")
                    parsed = fr.parse_frame(data, offset)
            except DecodeError as e:
                raise TransportError(TransportErrorCode.FRAME_ENCODING_ERROR, str(e)) from e
            frame, used = parsed
            payload = b""
            if isinstance(frame, fr.Stream):
                end = offset + used
                payload = bytes(data[end - frame.length:end])
            offset += used
            frames.append((frame, payload))
        return frames

    def _plugin_parse(self, frame_type: int, data: bytes, offset: int) -> Optional[Tuple[object, int]]:
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

    def _process(self, frame, payload: bytes, now: int) -> None:
        """ProcessFrame: a plugin Define replaces the native step, Before / After hooks observe it."""
        rid = RoutineId(RoutineKind.PROCESS_FRAME, frame.frame_type)
        inputs = [PluginVal.frame(frame), PluginVal.instant(now)]
        if self.engine.provides(rid):
            result = self._run(RoutineKind.PROCESS_FRAME, frame.frame_type, inputs)
            if result is not None or isinstance(frame, fr.Extension):
                return
        observed = self.engine.has_observers(rid)
        if observed:
            self.engine.observe(rid, Anchor.BEFORE, inputs)
        self._process_native(frame, payload, now)
        if observed:
            self.engine.observe(rid, Anchor.AFTER, inputs)

    def _process_native(self, frame, payload: bytes, now: int) -> None:
        if isinstance(frame, fr.Ack):
            self._on_ack(frame, now)
        elif isinstance(frame, fr.Crypto):
            self._on_crypto(frame)
        elif isinstance(frame, fr.Stream):
            end = frame.offset + frame.length
            if end > self.max_rx_data:
                raise TransportError(TransportErrorCode.FLOW_CONTROL_ERROR,
                                     f"stream data up to {end} exceeds limit {self.max_rx_data}")
            was_complete = self.recv_stream.complete
            self.recv_stream.on_data(frame.offset, payload, frame.fin)
            if self.recv_stream.complete and not was_complete:
                logger.info(f"{self.role.value} received all {self.recv_stream.final_size} "
                            f"stream octets at t={now}us")
        elif isinstance(frame, fr.MaxData):
            self.max_tx_data = max(self.max_tx_data, frame.maximum)
        elif isinstance(frame, fr.PathChallenge):
            self._path_responses.append(fr.PathResponse(frame.data))
        elif isinstance(frame, fr.ConnectionClose):
            logger.info(f"{self.role.value} peer closed: code=0x{frame.code:x} {frame.reason!r}")
            self.closed = True
            self.close_code = frame.code

    def _on_packet_received(self, kind: PacketKind, pkt_num: int, now: int, ack_eliciting: bool) -> None:
        in_order = self.largest_rx_pkt_num is None or pkt_num == self.largest_rx_pkt_num + 1
        self.received.add(pkt_num, pkt_num + 1)
        self.received.trim(self.max_ack_ranges)
        if self.largest_rx_pkt_num is None or pkt_num > self.largest_rx_pkt_num:
            self.largest_rx_pkt_num = pkt_num
            self._largest_rx_time = now
        self._ack_pending = True
        if not ack_eliciting:
            return
        self._unacked_eliciting += 1
        if kind == PacketKind.INITIAL or not in_order or self._unacked_eliciting >= self.ack_threshold:
            self._ack_due = True
        elif self._ack_deadline is None:
            self._ack_deadline = now + self.max_ack_delay

    # ------------------------------------------------------------------
    # Acknowledgements and loss
    # ------------------------------------------------------------------

    def _ack_frame(self, now: int) -> fr.Ack:
        intervals = list(self.received.descending())
        ranges = [(0, intervals[0][1] - intervals[0][0])]
        for (prev_low, _), (low, high) in zip(intervals, intervals[1:]):
            ranges.append((prev_low - high - 2, high - low))
        return fr.Ack(intervals[0][1], max(0, now - self._largest_rx_time), tuple(ranges))

    def _notify(self, frame_type: int, frame, acknowledged: bool) -> None:
        if self._defines(RoutineKind.NOTIFY_FRAME, frame_type):
            self._run(RoutineKind.NOTIFY_FRAME, frame_type, [PluginVal.frame(frame), PluginVal.boolean(acknowledged)])

    def _on_ack(self, ack: fr.Ack, now: int) -> None:
        acked, lost = self.loss.on_ack(ack.intervals(), ack.largest_acked, ack.ack_delay, now)
        for packet in acked:
            self.cc.on_acked(packet)
            for sent in packet.frames:
                if sent.plugin_type is not None:
                    self._notify(sent.plugin_type, sent.frame, True)
                elif isinstance(sent.frame, fr.Stream):
                    self.send_stream.on_acked(sent.frame.offset, sent.frame.length, sent.frame.fin)
        self._on_lost(lost, now)
        self.pacer.update_rate(self.cc.cwnd, self.rtt.smoothed)

    def _on_lost(self, lost: List[SentPacket], now: int) -> None:
        if not lost:
            return
        self.cc.on_lost(lost, now)
        for packet in lost:
            logger.debug(f"{self.role.value} packet {packet.pkt_num} lost")
            for sent in packet.frames:
                frame = sent.frame
                if sent.plugin_type is not None:
                    self._notify(sent.plugin_type, frame, False)
                elif isinstance(frame, fr.Stream):
                    self.send_stream.on_lost(frame.offset, frame.length, frame.fin)
                elif isinstance(frame, fr.Crypto):
                    if self.is_server or not self.established:
                        self._crypto_pending = True
                elif isinstance(frame, fr.MaxData):
                    self._max_data_resend = True

    # ------------------------------------------------------------------
    # Timers
    # ------------------------------------------------------------------

    def next_timeout(self) -> Optional[int]:
        """Earliest time `handle_timeout` has work to do, or None."""
        if self.closed:
            # a pending close may wait on a plugin timer
            return self.engine.next_deadline() if self._close_pending else None
        candidates = [self.loss.next_timeout(), self._ack_deadline, self.engine.next_deadline()]
        if self._pacing_blocked:
            candidates.append(self.pacer.next_send_time(self._now))
        if self.established:
            candidates.append(self._last_activity + self.idle_timeout)
        due = [t for t in candidates if t is not None]
        return min(due) if due else None

    def handle_timeout(self, now: int) -> None:
        self._enter(now)
        if self.closed:
            if self._close_pending:
                self.engine.fire_due_timers(now)
            return
        if self.established and now >= self._last_activity + self.idle_timeout:
            logger.info(f"{self.role.value} idle timeout at t={now}us")
            self.closed = True
            return
        if self._ack_deadline is not None and now >= self._ack_deadline:
            self._ack_due = True
            self._ack_deadline = None
        if self.loss.loss_time is not None and now >= self.loss.loss_time:
            self._on_lost(self.loss.detect_lost(now), now)
        else:
            pto = self.loss.pto_deadline()
            if pto is not None and now >= pto:
                self.loss.pto_count += 1
                logger.debug(f"{self.role.value} PTO #{self.loss.pto_count} at t={now}us")
                if self.established:
                    self._pto_owed = 1
                else:
                    self._crypto_pending = True
        self.engine.fire_due_timers(now)

    # ------------------------------------------------------------------
    # Sending
    # ------------------------------------------------------------------

    def send_packets(self, now: int) -> List[Packet]:
        """Write and commit every packet the connection may send at `now`."""
        self._enter(now)
        packets = []
        if self.closed:
            if self._close_pending:
                packet = self._send_close(now)
                if packet is not None:
                    packets.append(packet)
            return packets
        if self._crypto_pending or (self._ack_due and not self.established):
            packets.append(self._send_initial(now))
        if not self.established:
            return packets
        self._pacing_blocked = False
        for _ in range(MAX_BATCH):
            packet = self._send_one_rtt(now)
            if packet is None:
                break
            packets.append(packet)
        else:
            logger.warning(f"{self.role.value} hit the batch limit of {MAX_BATCH} packets")
        return packets

    def _send_initial(self, now: int) -> Packet:
        pkt_num = self.next_pkt_num
        buf = bytearray(encode_header(PacketKind.INITIAL, pkt_num))
        sent = []
        if self._ack_pending:
            sent.append(self._put_native(buf, self._ack_frame(now)))
        if self._crypto_pending:
            sent.append(self._put_native(buf, fr.Crypto(0, self._crypto_message)))
        if len(buf) < self.initial_packet_size:
            padding = fr.Padding(self.initial_packet_size - len(buf))
            buf += fr.frame_wire(padding)
            sent.append(SentFrame(padding))
        return self._commit(PacketKind.INITIAL, pkt_num, bytes(buf), sent, 0, now)

    def _send_close(self, now: int) -> Optional[Packet]:
        """
        CONNECTION_CLOSE, padded like any OneRtt packet when a PADDING
        registration asks for it. None while that registration halts sending.
        """
        kind = PacketKind.ONE_RTT if self.established else PacketKind.INITIAL
        pkt_num = self.next_pkt_num
        buf = bytearray(encode_header(kind, pkt_num))
        sent = []
        fill_owner = None
        if kind == PacketKind.ONE_RTT and PADDING in self._registered_frame_types():
            outcome = self._prepare_registration(PADDING, self.mtu - len(buf))
            if outcome is HALT:
                logger.debug(f"{self.role.value} close held back by PADDING")
                return None
            if outcome is not None:
                frame, wire_len = outcome
                if wire_len == 0:
                    fill_owner = PADDING
                else:
                    image = self._plugin_write(PADDING, frame, wire_len)
                    if image is not None:
                        buf += image
                        sent.append(SentFrame(frame, PADDING))
        sent.append(self._put_native(buf, fr.ConnectionClose(self.close_code, self._close_reason)))
        if fill_owner is not None:
            padding = fr.Padding(self.mtu - len(buf))
            self._put_native(buf, padding)
            sent.append(SentFrame(padding, fill_owner))
        return self._commit(kind, pkt_num, bytes(buf), sent, 0, now)

    def _send_one_rtt(self, now: int) -> Optional[Packet]:
        pkt_num = self.next_pkt_num
        buf = bytearray(encode_header(PacketKind.ONE_RTT, pkt_num))
        sent = []
        fill_owner: Optional[int] = None
        data_ok: Optional[bool] = None

        for frame_type in self._registered_frame_types():
            if frame_type > fr.CORE_FRAME_TYPE_MAX:
                # extension frames follow congestion control
                if data_ok is None:
                    data_ok = self._may_send_data(now)
                if not data_ok:
                    continue
            outcome = self._prepare_registration(frame_type, self.mtu - len(buf))
            if outcome is HALT:
                logger.debug(f"Sending halted by frame 0x{frame_type:x} at pn={pkt_num}")
                return None
            if outcome is None:
                continue
            frame, wire_len = outcome
            if wire_len == 0:
                fill_owner = frame_type
                continue
            image = self._plugin_write(frame_type, frame, wire_len)
            if image is not None:
                buf += image
                sent.append(SentFrame(frame, frame_type))

        stream_ready = self._stream_ready(now)
        eliciting = stream_ready or any(fr.is_ack_eliciting(s.frame) for s in sent)
        for frame in self._control_frames(now, eliciting):
            if fr.frame_wire_len(frame) <= self.mtu - len(buf):
                sent.append(self._put_native(buf, frame))

        retransmitted = 0
        while stream_ready:
            chunk = self._next_stream_frame(self.mtu - len(buf))
            if chunk is None:
                break
            frame, payload, is_retx = chunk
            sent.append(self._put_native(buf, frame, payload))
            if is_retx:
                retransmitted += frame.length

        if all(isinstance(s.frame, fr.Padding) for s in sent):
            return None
        if fill_owner is not None:
            padding = fr.Padding(self.mtu - len(buf))
            self._put_native(buf, padding)
            sent.append(SentFrame(padding, fill_owner))
        return self._commit(PacketKind.ONE_RTT, pkt_num, bytes(buf), sent, retransmitted, now)

    def _put_native(self, buf: bytearray, frame, payload: Optional[bytes] = None) -> SentFrame:
        """Append the wire image of a core frame to `buf`."""
        buf += self._write_native(frame, payload)
        return SentFrame(frame)

    def _write_native(self, frame, payload: Optional[bytes] = None) -> bytes:
        """
        WriteFrame for a core frame. A Define hook writes the image through a
        capability of exactly the native length; STREAM also gets a read-only
        capability over its payload. Without one, or after a length breach,
        the native image is used between Before and After hooks.
        """
        rid = RoutineId(RoutineKind.WRITE_FRAME, frame.frame_type)
        if self.engine.provides(rid):
            owner = self.engine.define_owner(rid)
            wire_len = fr.frame_wire_len(frame)
            buffer = bytearray(wire_len)
            cap = self.engine.bytes_expose(buffer, 0, wire_len)
            inputs = [PluginVal.frame(frame), PluginVal.bytes_cap(cap)]
            if isinstance(frame, fr.Stream):
                data = bytearray(payload if payload is not None else bytes(frame.length))
                inputs.append(PluginVal.bytes_cap(self.engine.bytes_expose(data, len(data), 0)))
            result = self._run(RoutineKind.WRITE_FRAME, frame.frame_type, inputs)
            if result is not None and result.ok:
                written = result.written.get(cap.tag, 0)
                if written == wire_len:
                    return bytes(buffer)
                self._breach(rid, owner, written, wire_len)
        observed = self.engine.has_observers(rid)
        if observed:
            self.engine.observe(rid, Anchor.BEFORE, [PluginVal.frame(frame)])
        image = fr.frame_wire(frame, payload)
        if observed:
            cap = self.engine.bytes_expose(bytearray(image), len(image), 0)
            self.engine.observe(rid, Anchor.AFTER, [PluginVal.frame(frame), PluginVal.bytes_cap(cap)])
        return image

    def _plugin_write(self, frame_type: int, frame, wire_len: int) -> Optional[bytes]:
        """WriteFrame for a registered type; None drops the frame."""
        rid = RoutineId(RoutineKind.WRITE_FRAME, frame_type)
        if not self.engine.provides(rid):
            if isinstance(frame, fr.Extension):
                return None
            return self._write_native(frame)
        owner = self.engine.define_owner(rid)
        buffer = bytearray(wire_len)
        cap = self.engine.bytes_expose(buffer, 0, wire_len)
        result = self._run(RoutineKind.WRITE_FRAME, frame_type, [PluginVal.frame(frame), PluginVal.bytes_cap(cap)])
        if result is None or not result.ok:
            return None
        written = result.written.get(cap.tag, 0)
        if written != wire_len:
            self._breach(rid, owner, written, wire_len)
            return None
        return bytes(buffer)

    def _commit(self, kind: PacketKind, pkt_num: int, image: bytes, sent: List[SentFrame],
                retransmitted: int, now: int) -> Packet:
        self.next_pkt_num = pkt_num + 1
        ack_eliciting = any(fr.is_ack_eliciting(s.frame) for s in sent)
        for s in sent:
            if s.plugin_type is not None:
                if self._defines(RoutineKind.ON_FRAME_RESERVED, s.plugin_type):
                    self._run(RoutineKind.ON_FRAME_RESERVED, s.plugin_type,
                              [PluginVal.frame(s.frame), PluginVal.u64(pkt_num)])
            else:
                self._on_native_sent(s.frame)
        packet = SentPacket(pkt_num, now, len(image), ack_eliciting, ack_eliciting, sent)
        self.loss.on_sent(packet)
        self.cc.on_sent(packet)
        if ack_eliciting:
            self.pacer.on_sent(now, packet.size)
            self._last_activity = now
            if self._pto_owed:
                self._pto_owed -= 1
        self.stats["packets_sent"] += 1
        self.stats["octets_sent"] += packet.size
        if retransmitted:
            self.stats["retransmissions"] += 1
            self.stats["retransmitted_octets"] += retransmitted
        if logger.isEnabledFor(logging.DEBUG):
            for s in sent:
                logger.debug(f"{self.role.value} tx pn={pkt_num} {self.log_frame(s.frame)}")
        if kind == PacketKind.INITIAL and self.is_server and not self.established \
                and any(isinstance(s.frame, fr.Crypto) for s in sent):
            self._set_established()
        return Packet(kind, pkt_num, image, tuple(s.frame.frame_type for s in sent))

    def _on_native_sent(self, frame) -> None:
        if isinstance(frame, fr.Ack):
            self._ack_pending = False
            self._ack_due = False
            self._unacked_eliciting = 0
            self._ack_deadline = None
        elif isinstance(frame, fr.MaxData):
            self.max_rx_data = frame.maximum
            self._max_data_resend = False
        elif isinstance(frame, fr.Crypto):
            self._crypto_pending = False
        elif isinstance(frame, fr.PathResponse):
            if frame in self._path_responses:
                self._path_responses.remove(frame)
        elif isinstance(frame, fr.ConnectionClose):
            self._close_pending = False

    # Scheduling

    def _registered_frame_types(self) -> List[int]:
        return list(dict.fromkeys(t for t, _ in self.engine.registrations().frame_types))

    def _may_send_data(self, now: int) -> bool:
        if self._pto_owed:
            return True
        if not self.cc.can_send():
            return False
        if not self.pacer.can_send(now):
            self._pacing_blocked = True
            return False
        return True

    def _prepare_registration(self, frame_type: int, room: int):
        """
        ShouldSendFrame, PrepareFrame and FrameWireLen for one registration.

        Returns:
            (frame, wire length), HALT, or None when nothing fits. A PADDING
            fill request comes back with wire length 0.
        """
        result = self._run(RoutineKind.SHOULD_SEND_FRAME, frame_type)
        if result is None or not result.ok or not result.outputs:
            return None
        wanted = result.outputs[0]
        if wanted.kind != ValKind.BOOL or not wanted.value:
            return None

        result = self._run(RoutineKind.PREPARE_FRAME, frame_type)
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
        if isinstance(frame, fr.Padding) and frame.length == 0:
            return frame, 0

        if self._defines(RoutineKind.FRAME_WIRE_LEN, frame_type):
            result = self._run(RoutineKind.FRAME_WIRE_LEN, frame_type, [PluginVal.frame(frame)])
            if result is None or not result.ok or not result.outputs \
                    or result.outputs[0].kind != ValKind.USIZE:
                wire_len = None
            else:
                wire_len = result.outputs[0].value
        elif isinstance(frame, fr.Extension):
            wire_len = None
        else:
            wire_len = fr.frame_wire_len(frame)
        if wire_len is None or wire_len <= 0 or wire_len > room:
            logger.debug(f"Frame 0x{frame_type:x} of {wire_len} octets does not fit {room}")
            return None
        return frame, wire_len

    def _max_data_due(self) -> bool:
        return 2 * self.recv_stream.highest > self.max_rx_data

    def _control_frames(self, now: int, eliciting: bool) -> List:
        """ACK, MAX_DATA, PATH_RESPONSE, then a PING when a PTO packet is owed and nothing else elicits."""
        frames = []
        plugin_max_data = self._defines(RoutineKind.PREPARE_FRAME, fr.MaxData.frame_type)
        if not plugin_max_data and (self._max_data_resend or self._max_data_due()):
            new_limit = self.recv_stream.highest + self.max_rx_data if self._max_data_due() else self.max_rx_data
            frames.append(fr.MaxData(new_limit))
        frames.extend(self._path_responses)
        eliciting = eliciting or bool(frames)
        if self._pto_owed and not eliciting:
            frames.append(fr.Ping())
            eliciting = True
        if self._ack_pending and (self._ack_due or eliciting):
            frames.insert(0, self._ack_frame(now))
        return frames

    def _stream_ready(self, now: int) -> bool:
        stream = self.send_stream
        sendable = (stream.has_retransmit()
                    or stream.next_offset < min(stream.length, self.max_tx_data)
                    or (stream.fin and not stream.fin_sent and stream.next_offset == stream.length))
        return sendable and self._may_send_data(now)

    def _next_stream_frame(self, room: int) -> Optional[Tuple[fr.Stream, bytes, bool]]:
        max_length = room - 2 - varint_len(self.send_stream.length) - varint_len(room)
        if room < MIN_STREAM_ROOM or max_length <= 0:
            return None
        chunk = self.send_stream.next_chunk(max_length, self.max_tx_data)
        if chunk is None:
            return None
        offset, length, fin, retransmission = chunk
        frame = fr.Stream(STREAM_ID, offset, length, fin)
        return frame, self.send_stream.octets(offset, length), retransmission
