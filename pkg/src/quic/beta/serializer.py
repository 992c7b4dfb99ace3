"""
Beta serializer: renders a PacketPlan to its wire image.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

from src.common import frames as fr
from src.common.recovery import SentFrame
from src.common.wire import PacketKind, encode_header
from src.quic.beta.routines import RoutineBridge
from src.quic.beta.scheduler import PacketPlan

logger = logging.getLogger(__name__)


@dataclass
class RenderedPacket:
    kind: PacketKind
    pkt_num: int
    image: bytes
    frames: List[SentFrame] = field(default_factory=list)
    retransmitted: int = 0


class Serializer:
    def __init__(self, bridge: RoutineBridge):
        self.bridge = bridge

    def render(self, plan: PacketPlan) -> Optional[RenderedPacket]:
        """
        Write every planned frame. Plugin frames whose WriteFrame breaks its
        length contract are left out; a fill request is sized last, to the
        room actually left.

        Returns:
            RenderedPacket, or None when nothing but padding survived
        """
        out = bytearray(encode_header(plan.kind, plan.pkt_num))
        sent = []
        retransmitted = 0
        for planned in plan.frames:
            if planned.plugin_type is not None:
                image = self.bridge.render_offer(planned.plugin_type, planned.frame, planned.wire_len)
                if image is None:
                    logger.debug(f"Dropped planned frame 0x{planned.plugin_type:x} from pn={plan.pkt_num}")
                    continue
            else:
                image = self.bridge.render_core(planned.frame, planned.payload)
            out += image
            sent.append(SentFrame(planned.frame, planned.plugin_type))
            if planned.retransmission:
                retransmitted += planned.frame.length

        if all(isinstance(s.frame, fr.Padding) for s in sent):
            return None
        if plan.fill_owner is not None:
            padding = fr.Padding(plan.size_limit - len(out))
            out += self.bridge.render_core(padding)
            sent.append(SentFrame(padding, plan.fill_owner))
        return RenderedPacket(plan.kind, plan.pkt_num, bytes(out), sent, retransmitted)

    def render_initial(self, pkt_num: int, frames: List, size: int) -> RenderedPacket:
        """An Initial packet of `frames`, padded with native PADDING up to `size` octets."""
        out = bytearray(encode_header(PacketKind.INITIAL, pkt_num))
        sent = []
        for frame in frames:
            out += self.bridge.render_core(frame)
            sent.append(SentFrame(frame))
        if len(out) < size:
            padding = fr.Padding(size - len(out))
            out += fr.frame_wire(padding)
            sent.append(SentFrame(padding))
        return RenderedPacket(PacketKind.INITIAL, pkt_num, bytes(out), sent)
