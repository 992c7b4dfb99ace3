"""
Beta backend: a scheduler plans each packet, a serializer writes it.

The connection itself only sequences the parts: handshake state, the ACK
tracker, recovery wiring and the routine bridge. Fields are exposed through
a FieldTable bound per field group.
"""

import logging
from collections import deque
from pathlib import Path
from typing import Deque, FrozenSet, List, Optional, Sequence

from src.common import frames as fr
from src.common.endpoint import Role, default_addresses
from src.common.errors import DecodeError, TransportError, TransportErrorCode
from src.common.fields import ALL_FIELDS, ConnectionField as F, FieldGroup
from src.common.recovery import MS, SentPacket
from src.common.streams import RecvStream, SendStream
from src.common.values import PluginVal, SocketAddr
from src.common.wire import Packet, PacketKind, decode_header
from src.config import config
from src.engine.engine import PluginEngine, RoutineResult
from src.engine.permissions import PermissionSet
from src.engine.plugin import PluginHandle
from src.quic.beta.fields import FieldBinding, FieldTable
from src.quic.beta.handshake import Handshake, decode_peer_parameters
from src.quic.beta.receiver import AckTracker, read_frames
from src.quic.beta.recovery import Recovery
from src.quic.beta.routines import HALT, RoutineBridge
from src.quic.beta.scheduler import Scheduler
from src.quic.beta.serializer import RenderedPacket, Serializer

logger = logging.getLogger(__name__)

MAX_BATCH = 256


class BetaConnection:
    """
    One endpoint driven by an external event loop: `receive_packet`,
    `handle_timeout` and `send_packets` in turn order.

    Takes the same arguments as the alpha connection.
    """

    backend = "beta"

    def __init__(self, role, local_addr: Optional[str] = None, peer_addr: Optional[str] = None,
                 mtu: Optional[int] = None, seed: int = 0, sandbox_root: Optional[Path] = None,
                 supported_fields: Optional[FrozenSet[F]] = None, keep_stream_data: bool = False):
        settings = config.transport
        self.role = Role(role)
        own, other = default_addresses(self.role)
        self.local_addr = SocketAddr.parse(local_addr or own)
        self.peer_addr = SocketAddr.parse(peer_addr or other)
        self.mtu = mtu or settings['mtu']
        self.initial_packet_size = settings['initial_packet_size']
        self.idle_timeout = settings['idle_timeout_ms'] * MS
        max_ack_delay = settings['max_ack_delay_ms'] * MS
        self._now = 0

        self.max_rx_data = settings['initial_max_data']
        self.max_tx_data = 0
        self.max_data_resend = False
        self.path_responses: Deque[fr.PathResponse] = deque()
        self.send_stream = SendStream()
        self.recv_stream = RecvStream(keep_data=keep_stream_data)

        self.next_pkt_num = 0
        self.acks = AckTracker(settings['ack_eliciting_threshold'], max_ack_delay, settings['max_ack_ranges'])
        self.recovery = Recovery(self.mtu, max_ack_delay)
        self.handshake = Handshake(self.is_server)

        self.established = False
        self.closed = False
        self.close_code: Optional[int] = None
        self._close_pending = False
        self._close_reason = b""
        self._last_activity = 0
        self.stats = {
            "packets_sent": 0,
            "packets_received": 0,
            "octets_sent": 0,
            "retransmissions": 0,
            "retransmitted_octets": 0,
        }

        self.engine = PluginEngine(self, clock=lambda: self._now, seed=seed, sandbox_root=sandbox_root)
        self.bridge = RoutineBridge(self.engine)
        self.scheduler = Scheduler(self)
        self.serializer = Serializer(self.bridge)
        supported = frozenset(supported_fields) if supported_fields is not None else ALL_FIELDS
        self.fields = FieldTable(supported)
        self._bind_fields()

    def _bind_fields(self) -> None:
        self.fields.bind(FieldGroup.CONNECTION, {
            F.IS_SERVER: FieldBinding(lambda: self.is_server),
            F.MAX_TX_DATA: FieldBinding(lambda: self.max_tx_data, self._set_max_tx_data),
            F.TX_DATA: FieldBinding(lambda: self.send_stream.next_offset),
            F.MAX_RX_DATA: FieldBinding(lambda: self.max_rx_data, self._set_max_rx_data),
            F.RX_DATA: FieldBinding(lambda: self.recv_stream.highest),
            F.MTU: FieldBinding(lambda: self.mtu),
            F.PEER_ADDR: FieldBinding(lambda: self.peer_addr),
            F.LOCAL_ADDR: FieldBinding(lambda: self.local_addr),
            F.IS_ESTABLISHED: FieldBinding(lambda: self.established),
            F.IDLE_TIMEOUT: FieldBinding(lambda: self.idle_timeout, self._set_idle_timeout),
        })
        acks, recovery = self.acks, self.recovery
        self.fields.bind(FieldGroup.SPACE, {
            F.NEXT_PKT_NUM: FieldBinding(lambda: self.next_pkt_num),
            F.LARGEST_RX_PKT_NUM: FieldBinding(lambda: acks.largest or 0),
            F.ACK_ELICITING_IN_FLIGHT: FieldBinding(lambda: recovery.loss.ack_eliciting_in_flight),
        })
        cc, rtt = recovery.cc, recovery.rtt
        self.fields.bind(FieldGroup.RECOVERY, {
            F.CWND: FieldBinding(lambda: cc.cwnd, recovery.set_cwnd),
            F.SSTHRESH: FieldBinding(lambda: cc.ssthresh, recovery.set_ssthresh),
            F.BYTES_IN_FLIGHT: FieldBinding(lambda: cc.bytes_in_flight),
            F.SMOOTHED_RTT: FieldBinding(lambda: rtt.smoothed),
            F.RTT_VAR: FieldBinding(lambda: rtt.var),
            F.MIN_RTT: FieldBinding(lambda: rtt.min),
            F.LATEST_RTT: FieldBinding(lambda: rtt.latest),
            F.LOSS_COUNT: FieldBinding(lambda: recovery.loss.loss_count),
            F.PACING_RATE: FieldBinding(lambda: recovery.pacer.rate, recovery.set_pacing_rate),
            F.IN_SLOW_START: FieldBinding(lambda: cc.in_slow_start, cc.set_slow_start),
        })

    def _set_max_tx_data(self, value: int) -> None:
        self.max_tx_data = value

    def _set_max_rx_data(self, value: int) -> None:
        if value < self.recv_stream.highest:
            raise ValueError(f"MAX_RX_DATA {value} below data already received")
        self.max_rx_data = value

    def _set_idle_timeout(self, value: int) -> None:
        self.idle_timeout = value

    def __repr__(self) -> str:
        return f"<BetaConnection {self.role.value} {self.local_addr}>"

    @property
    def is_server(self) -> bool:
        return self.role == Role.SERVER

    @property
    def now(self) -> int:
        return self._now

    @property
    def cwnd(self) -> int:
        return self.recovery.cc.cwnd

    def _enter(self, now: int) -> None:
        self._now = max(self._now, now)

    # ------------------------------------------------------------------
    # Host contract and plugins
    # ------------------------------------------------------------------

    def supported_fields(self) -> FrozenSet[F]:
        return self.fields.supported_fields()

    def get_field(self, fld: F) -> PluginVal:
        return self.fields.get(fld)

    def set_field(self, fld: F, value: PluginVal) -> None:
        self.fields.set(fld, value)

    def load_plugin(self, bytecode: bytes, permissions: PermissionSet,
                    name: Optional[str] = None) -> PluginHandle:
        return self.engine.load_plugin(bytecode, permissions, name)

    def plugin_control(self, plugin_id: str, op: int,
                       args: Sequence[PluginVal] = ()) -> RoutineResult:
        return self.engine.plugin_control(plugin_id, op, args)

    def log_frame(self, frame) -> str:
        return self.bridge.describe(frame)

    def registered_frame_types(self) -> List[int]:
        return list(dict.fromkeys(t for t, _ in self.engine.registrations().frame_types))

    @property
    def contract_breaches(self) -> int:
        return self.bridge.contract_breaches

    # ------------------------------------------------------------------
    # Application interface
    # ------------------------------------------------------------------

    def send_stream_data(self, data: Optional[bytes] = None, length: Optional[int] = None,
                         fin: bool = True) -> None:
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
        return [sent.frame.frame_type for packet in self.recovery.loss.in_flight_packets()
                for sent in packet.frames]

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
        self._enter(now)
        if self.is_server:
            raise ValueError("only a client connects")
        self._last_activity = now
        self.handshake.queue(self._local_parameters())
        logger.info(f"{self.role.value} (beta) connecting to {self.peer_addr}")

    def _local_parameters(self) -> bytes:
        return Handshake.encode(self.max_rx_data, self.idle_timeout, self.acks.max_delay,
                                self.bridge.plugin_parameters())

    def _accept_parameters(self, message: bytes) -> None:
        peer = decode_peer_parameters(message)
        if peer.max_data is not None:
            self.max_tx_data = max(self.max_tx_data, peer.max_data)
        if peer.idle_timeout is not None:
            self.idle_timeout = min(self.idle_timeout, peer.idle_timeout)
        if peer.max_ack_delay is not None:
            self.recovery.loss.max_ack_delay = peer.max_ack_delay
        self.handshake.peer = peer
        for tp in peer.extensions:
            if not self.bridge.accept_parameter(tp):
                logger.debug(f"Ignoring transport parameter 0x{tp.param_type:x}")

    def _on_crypto(self, frame: fr.Crypto) -> None:
        if self.is_server:
            if self.handshake.peer is None:
                self._accept_parameters(frame.data)
                self.handshake.queue(self._local_parameters())
            else:
                # our reply was lost
                self.handshake.pending = True
        elif not self.established:
            self._accept_parameters(frame.data)
            self.handshake.pending = False
            self._set_established()

    def _set_established(self) -> None:
        self.established = True
        logger.info(f"{self.role.value} (beta) handshake complete at t={self._now}us, "
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
        if pkt_num in self.acks:
            logger.debug(f"{self.role.value} duplicate packet {pkt_num}")
            return
        self.stats["packets_received"] += 1
        self._last_activity = now
        try:
            frames = read_frames(self.bridge, data, offset)
            for frame, payload in frames:
                if logger.isEnabledFor(logging.DEBUG):
                    logger.debug(f"{self.role.value} rx pn={pkt_num} {self.bridge.describe(frame)}")
                self.bridge.process(frame, now, lambda f=frame, p=payload: self._apply(f, p, now))
                if self.closed:
                    return
        except TransportError as e:
            logger.warning(f"{self.role.value} connection error {e.code.name}: {e.reason}")
            self.close(e.code, e.reason.encode()[:fr.MAX_CLOSE_REASON])
            return
        self.acks.record(kind, pkt_num, now, any(fr.is_ack_eliciting(f) for f, _ in frames))

    def _apply(self, frame, payload: bytes, now: int) -> None:
        """Native ProcessFrame."""
        if isinstance(frame, fr.Ack):
            self.recovery.on_ack(frame, now, self._on_packet_acked, self._on_packet_lost)
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
            self.path_responses.append(fr.PathResponse(frame.data))
        elif isinstance(frame, fr.ConnectionClose):
            logger.info(f"{self.role.value} peer closed: code=0x{frame.code:x} {frame.reason!r}")
            self.closed = True
            self.close_code = frame.code

    def _on_packet_acked(self, packet: SentPacket) -> None:
        for sent in packet.frames:
            if sent.plugin_type is not None:
                self.bridge.notify(sent.plugin_type, sent.frame, True)
            elif isinstance(sent.frame, fr.Stream):
                self.send_stream.on_acked(sent.frame.offset, sent.frame.length, sent.frame.fin)

    def _on_packet_lost(self, packet: SentPacket) -> None:
        for sent in packet.frames:
            frame = sent.frame
            if sent.plugin_type is not None:
                self.bridge.notify(sent.plugin_type, frame, False)
            elif isinstance(frame, fr.Stream):
                self.send_stream.on_lost(frame.offset, frame.length, frame.fin)
            elif isinstance(frame, fr.Crypto):
                self.handshake.on_lost(self.established)
            elif isinstance(frame, fr.MaxData):
                self.max_data_resend = True

    # ------------------------------------------------------------------
    # Timers
    # ------------------------------------------------------------------

    def next_timeout(self) -> Optional[int]:
        if self.closed:
            # a pending close may wait on a plugin timer
            return self.engine.next_deadline() if self._close_pending else None
        candidates = [self.acks.deadline, self.engine.next_deadline(), *self.recovery.next_timeout(self._now)]
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
        self.acks.expire(now)
        if self.recovery.expire(now, self._on_packet_lost):
            if self.established:
                self.recovery.pto_owed = 1
            else:
                self.handshake.pending = True
        self.engine.fire_due_timers(now)

    # ------------------------------------------------------------------
    # Sending
    # ------------------------------------------------------------------

    def send_packets(self, now: int) -> List[Packet]:
        self._enter(now)
        packets = []
        if self.closed:
            if self._close_pending:
                plan = self.scheduler.plan_close(fr.ConnectionClose(self.close_code, self._close_reason))
                if plan is not HALT:
                    packets.append(self._commit(self.serializer.render(plan), now))
            return packets
        if self.handshake.pending or (self.acks.due and not self.established):
            frames = [self.acks.frame(now)] if self.acks.pending else []
            if self.handshake.pending:
                frames.append(fr.Crypto(0, self.handshake.message))
            rendered = self.serializer.render_initial(self.next_pkt_num, frames, self.initial_packet_size)
            packets.append(self._commit(rendered, now))
        if not self.established:
            return packets
        self.recovery.pacing_blocked = False
        for _ in range(MAX_BATCH):
            plan = self.scheduler.plan(now)
            if plan is None or plan is HALT:
                break
            rendered = self.serializer.render(plan)
            if rendered is None:
                break
            packets.append(self._commit(rendered, now))
        else:
            logger.warning(f"{self.role.value} hit the batch limit of {MAX_BATCH} packets")
        return packets

    def _commit(self, rendered: RenderedPacket, now: int) -> Packet:
        pkt_num = rendered.pkt_num
        self.next_pkt_num = pkt_num + 1
        ack_eliciting = any(fr.is_ack_eliciting(s.frame) for s in rendered.frames)
        for s in rendered.frames:
            if s.plugin_type is not None:
                self.bridge.reserved(s.plugin_type, s.frame, pkt_num)
            else:
                self._on_core_frame_sent(s.frame)
        packet = SentPacket(pkt_num, now, len(rendered.image), ack_eliciting, ack_eliciting, rendered.frames)
        self.recovery.on_sent(packet, now)
        if ack_eliciting:
            self._last_activity = now
        self.stats["packets_sent"] += 1
        self.stats["octets_sent"] += packet.size
        if rendered.retransmitted:
            self.stats["retransmissions"] += 1
            self.stats["retransmitted_octets"] += rendered.retransmitted
        if logger.isEnabledFor(logging.DEBUG):
            for s in rendered.frames:
                logger.debug(f"{self.role.value} tx pn={pkt_num} {self.bridge.describe(s.frame)}")
        if rendered.kind == PacketKind.INITIAL and self.is_server and not self.established \
                and any(isinstance(s.frame, fr.Crypto) for s in rendered.frames):
            self._set_established()
        return Packet(rendered.kind, pkt_num, rendered.image, tuple(s.frame.frame_type for s in rendered.frames))

    def _on_core_frame_sent(self, frame) -> None:
        if isinstance(frame, fr.Ack):
            self.acks.sent()
        elif isinstance(frame, fr.MaxData):
            self.max_rx_data = frame.maximum
            self.max_data_resend = False
        elif isinstance(frame, fr.Crypto):
            self.handshake.pending = False
        elif isinstance(frame, fr.PathResponse):
            if frame in self.path_responses:
                self.path_responses.remove(frame)
        elif isinstance(frame, fr.ConnectionClose):
            self._close_pending = False
