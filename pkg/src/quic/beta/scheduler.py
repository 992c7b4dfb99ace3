"""
Beta send scheduler: decides what goes into the next packet without writing it.

The result is a PacketPlan, a list of planned frames with their wire lengths,
rendered afterwards by the serializer. Planning order is plugin
registrations, then native control frames, then stream 0.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

from src.common import frames as fr
from src.common.routines import RoutineKind
from src.common.streams import STREAM_ID
from src.common.varint import varint_len
from src.common.wire import PacketKind, header_len
from src.quic.beta.routines import HALT

logger = logging.getLogger(__name__)

# type, stream id and both varints of the smallest STREAM frame
MIN_STREAM_ROOM = 5
PADDING = fr.Padding.frame_type


@dataclass
class PlannedFrame:
    frame: object
    wire_len: int
    plugin_type: Optional[int] = None
    payload: Optional[bytes] = None
    retransmission: bool = False


@dataclass
class PacketPlan:
    pkt_num: int
    size_limit: int
    kind: PacketKind = PacketKind.ONE_RTT
    frames: List[PlannedFrame] = field(default_factory=list)
    # registration that asked for the remaining room to be padded
    fill_owner: Optional[int] = None
    used: int = 0

    @property
    def room(self) -> int:
        return self.size_limit - self.used

    def add(self, planned: PlannedFrame) -> None:
        self.frames.append(planned)
        self.used += planned.wire_len

    @property
    def has_content(self) -> bool:
        return any(not isinstance(p.frame, fr.Padding) for p in self.frames)

    @property
    def ack_eliciting(self) -> bool:
        return any(fr.is_ack_eliciting(p.frame) for p in self.frames)


class Scheduler:
    def __init__(self, connection):
        self.conn = connection

    def _new_plan(self, kind: PacketKind = PacketKind.ONE_RTT) -> PacketPlan:
        pkt_num = self.conn.next_pkt_num
        return PacketPlan(pkt_num, self.conn.mtu, kind, used=header_len(pkt_num))

    def plan(self, now: int):
        """
        Returns:
            PacketPlan, None when there is nothing worth sending, or HALT
        """
        plan = self._new_plan()
        if self._plan_registrations(plan, now) is HALT:
            return HALT
        stream_ready = self._stream_ready(now)
        for frame in self._control_frames(now, stream_ready or plan.ack_eliciting):
            wire_len = fr.frame_wire_len(frame)
            if wire_len <= plan.room:
                plan.add(PlannedFrame(frame, wire_len))
        while stream_ready:
            planned = self._stream_frame(plan.room)
            if planned is None:
                break
            plan.add(planned)

        if not plan.has_content:
            return None
        return plan

    def plan_close(self, frame: fr.ConnectionClose):
        """
        Plan a CONNECTION_CLOSE. Once established it is a OneRtt packet and
        a PADDING registration may pad it or hold it back (HALT).
        """
        conn = self.conn
        kind = PacketKind.ONE_RTT if conn.established else PacketKind.INITIAL
        plan = self._new_plan(kind)
        if kind == PacketKind.ONE_RTT and PADDING in conn.registered_frame_types():
            offer = conn.bridge.offer(PADDING, plan.room)
            if offer is HALT:
                logger.debug(f"Close in pn={plan.pkt_num} held back by PADDING")
                return HALT
            if offer is not None:
                self._take(plan, offer)
        plan.add(PlannedFrame(frame, fr.frame_wire_len(frame)))
        return plan

    @staticmethod
    def _take(plan: PacketPlan, offer) -> None:
        if offer.is_fill:
            plan.fill_owner = offer.frame_type
        else:
            plan.add(PlannedFrame(offer.frame, offer.wire_len, plugin_type=offer.frame_type))

    def _plan_registrations(self, plan: PacketPlan, now: int):
        conn = self.conn
        data_ok = None
        for frame_type in conn.registered_frame_types():
            if frame_type > fr.CORE_FRAME_TYPE_MAX:
                # extension frames follow congestion control
                if data_ok is None:
                    data_ok = conn.recovery.may_send_data(now)
                if not data_ok:
                    continue
            offer = conn.bridge.offer(frame_type, plan.room)
            if offer is HALT:
                logger.debug(f"Plan for pn={plan.pkt_num} halted by frame 0x{frame_type:x}")
                return HALT
            if offer is not None:
                self._take(plan, offer)
        return plan

    def _control_frames(self, now: int, eliciting: bool) -> List:
        """ACK, MAX_DATA, PATH_RESPONSE, then a PING when a PTO packet is owed and nothing else elicits."""
        conn = self.conn
        frames = []
        highest = conn.recv_stream.highest
        due = 2 * highest > conn.max_rx_data
        if not conn.bridge.defined(RoutineKind.PREPARE_FRAME, fr.MaxData.frame_type) \
                and (conn.max_data_resend or due):
            frames.append(fr.MaxData(highest + conn.max_rx_data if due else conn.max_rx_data))
        frames.extend(conn.path_responses)
        eliciting = eliciting or bool(frames)
        if conn.recovery.pto_owed and not eliciting:
            frames.append(fr.Ping())
            eliciting = True
        if conn.acks.pending and (conn.acks.due or eliciting):
            frames.insert(0, conn.acks.frame(now))
        return frames

    def _stream_ready(self, now: int) -> bool:
        conn = self.conn
        stream = conn.send_stream
        sendable = (stream.has_retransmit()
                    or stream.next_offset < min(stream.length, conn.max_tx_data)
                    or (stream.fin and not stream.fin_sent and stream.next_offset == stream.length))
        return sendable and conn.recovery.may_send_data(now)

    def _stream_frame(self, room: int) -> Optional[PlannedFrame]:
        stream = self.conn.send_stream
        max_length = room - 2 - varint_len(stream.length) - varint_len(room)
        if room < MIN_STREAM_ROOM or max_length <= 0:
            return None
        chunk = stream.next_chunk(max_length, self.conn.max_tx_data)
        if chunk is None:
            return None
        offset, length, fin, retransmission = chunk
        frame = fr.Stream(STREAM_ID, offset, length, fin)
        return PlannedFrame(frame, fr.frame_wire_len(frame), payload=stream.octets(offset, length),
                            retransmission=retransmission)
