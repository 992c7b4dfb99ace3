"""
Mock host: the smallest connection a plugin can be attached to.

Every field lives in a plain dict, frames are sent when the caller asks for
them and there is no network. Sending follows the per-registration routine
sequence (ShouldSendFrame, PrepareFrame, FrameWireLen, WriteFrame,
OnFrameReserved); receiving runs ParseFrame then ProcessFrame. Natively the
mock only knows MAX_DATA, so the same cycle can be measured with and without
a plugin.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from src.common import frames as fr
from src.common.endpoint import Role, default_addresses
from src.common.errors import DecodeError
from src.common.fields import ALL_FIELDS, ConnectionField as F
from src.common.recovery import MS
from src.common.routines import RoutineKind
from src.common.values import PluginVal, SocketAddr, TransportParameter, ValKind
from src.common.wire import PacketKind, decode_header, encode_header
from src.config import config
from src.engine.contract import check_field_value
from src.engine.engine import PluginEngine
from src.engine.permissions import PermissionSet
from src.engine.plugin import PluginHandle
from src.netsim.host_routines import HALT, RoutineDispatcher

logger = logging.getLogger(__name__)

MAX_DATA = fr.MaxData.frame_type

_WRAP = {
    ValKind.BOOL: PluginVal.boolean,
    ValKind.U64: PluginVal.u64,
    ValKind.USIZE: PluginVal.usize,
    ValKind.DURATION: PluginVal.duration,
    ValKind.SOCKET_ADDR: PluginVal.socket_addr,
}


@dataclass
class MockPacket:
    pkt_num: int
    image: bytes
    # (frame, registering frame type or None for native frames)
    frames: List[Tuple[object, Optional[int]]] = field(default_factory=list)


class MockHost:
    """
    HostConnectionContract over a field dict.

    Args:
        is_server: Value of the IsServer field
        seed: Seed for the plugin-visible random generator
        sandbox_root: Parent directory of the per-plugin sandboxes
        supported_fields: Fields exposed to plugins (default: all)
    """

    def __init__(self, is_server: bool = False, seed: int = 0, sandbox_root: Optional[Path] = None,
                 supported_fields: Optional[FrozenSet[F]] = None):
        transport = config.transport
        mtu = transport['mtu']
        local_addr, peer_addr = default_addresses(Role.SERVER if is_server else Role.CLIENT)
        self.now = 0
        self.mtu = mtu
        self._supported = frozenset(supported_fields) if supported_fields is not None else ALL_FIELDS
        initial_rtt = config.recovery['initial_rtt_ms'] * MS
        self.values: Dict[F, object] = {
            F.IS_SERVER: is_server,
            F.MAX_TX_DATA: transport['initial_max_data'],
            F.TX_DATA: 0,
            F.MAX_RX_DATA: transport['initial_max_data'],
            F.RX_DATA: 0,
            F.MTU: mtu,
            F.PEER_ADDR: SocketAddr.parse(peer_addr),
            F.LOCAL_ADDR: SocketAddr.parse(local_addr),
            F.IS_ESTABLISHED: True,
            F.IDLE_TIMEOUT: transport['idle_timeout_ms'] * MS,
            F.NEXT_PKT_NUM: 0,
            F.LARGEST_RX_PKT_NUM: 0,
            F.ACK_ELICITING_IN_FLIGHT: 0,
            F.CWND: config.recovery['initial_window_packets'] * mtu,
            F.SSTHRESH: (1 << 62) - 1,
            F.BYTES_IN_FLIGHT: 0,
            F.SMOOTHED_RTT: initial_rtt,
            F.RTT_VAR: initial_rtt // 2,
            F.MIN_RTT: initial_rtt,
            F.LATEST_RTT: initial_rtt,
            F.LOSS_COUNT: 0,
            F.PACING_RATE: 0,
            F.IN_SLOW_START: True,
        }
        self.engine = PluginEngine(self, clock=lambda: self.now, seed=seed, sandbox_root=sandbox_root)
        self.dispatch = RoutineDispatcher(self.engine)
        self.halted = False
        self.path_responses: List[fr.PathResponse] = []

    # ------------------------------------------------------------------
    # Host contract
    # ------------------------------------------------------------------

    def supported_fields(self) -> FrozenSet[F]:
        return self._supported

    def get_field(self, fld: F) -> PluginVal:
        if fld not in self._supported:
            raise KeyError(f"{fld.name} is not supported by this host")
        return _WRAP[fld.spec.kind](self.values[fld])

    def set_field(self, fld: F, value: PluginVal) -> None:
        if fld not in self._supported:
            raise KeyError(f"{fld.name} is not supported by this host")
        if not fld.spec.writable:
            raise PermissionError(f"{fld.name} is read-only")
        check_field_value(fld, value)
        self.values[fld] = value.value

    # ------------------------------------------------------------------
    # Plugins and negotiation
    # ------------------------------------------------------------------

    def load_plugin(self, bytecode: bytes, permissions: PermissionSet,
                    name: Optional[str] = None) -> PluginHandle:
        return self.engine.load_plugin(bytecode, permissions, name)

    def transport_parameters(self) -> List[TransportParameter]:
        return self.dispatch.write_transport_parameters(
            list(dict.fromkeys(t for t, _ in self.engine.registrations().tp_types)))

    def accept_transport_parameters(self, params: Sequence[TransportParameter]) -> None:
        for tp in params:
            self.dispatch.decode_transport_parameter(tp)

    def negotiate(self, peer: "MockHost") -> None:
        """Exchange plugin transport parameters in both directions."""
        ours, theirs = self.transport_parameters(), peer.transport_parameters()
        peer.accept_transport_parameters(ours)
        self.accept_transport_parameters(theirs)

    def advance(self, micros: int) -> int:
        """Move the clock forward and fire due plugin timers; returns timers fired."""
        self.now += micros
        return self.engine.fire_due_timers(self.now)

    # ------------------------------------------------------------------
    # Native MAX_DATA
    # ------------------------------------------------------------------

    def _max_data_due(self) -> bool:
        return 2 * self.values[F.RX_DATA] > self.values[F.MAX_RX_DATA]

    def _native_prepare(self, frame_type: int):
        if frame_type == MAX_DATA and self._max_data_due():
            return fr.MaxData(self.values[F.RX_DATA] + self.values[F.MAX_RX_DATA])
        return None

    def _native_reserved(self, frame) -> None:
        if isinstance(frame, fr.MaxData):
            self.values[F.MAX_RX_DATA] = frame.maximum

    def _native_process(self, frame) -> None:
        if isinstance(frame, fr.MaxData):
            self.values[F.MAX_TX_DATA] = max(self.values[F.MAX_TX_DATA], frame.maximum)
        elif isinstance(frame, fr.PathChallenge):
            self.path_responses.append(fr.PathResponse(frame.data))
        elif isinstance(frame, fr.Ack):
            self.values[F.LARGEST_RX_PKT_NUM] = max(self.values[F.LARGEST_RX_PKT_NUM], frame.largest_acked)

    # ------------------------------------------------------------------
    # Sending
    # ------------------------------------------------------------------

    def registered_frame_types(self) -> List[int]:
        return list(dict.fromkeys(t for t, _ in self.engine.registrations().frame_types))

    def _prepare(self, frame_type: int):
        if self.dispatch.provides(RoutineKind.SHOULD_SEND_FRAME, frame_type) or \
                self.dispatch.provides(RoutineKind.PREPARE_FRAME, frame_type):
            if not self.dispatch.should_send(frame_type):
                return None
            return self.dispatch.prepare(frame_type)
        return self._native_prepare(frame_type)

    def send_frames(self, frame_types: Optional[Sequence[int]] = None,
                    native_frames: Sequence = ()) -> Optional[MockPacket]:
        """
        Build one packet: the routine sequence for each frame type, then
        `native_frames` written as-is.

        Args:
            frame_types: Types to schedule; default every registered type
            native_frames: Extra core frames (ACK, PATH_RESPONSE, ...)

        Returns:
            MockPacket, or None when a plugin halted sending or nothing was written
        """
        pkt_num = self.values[F.NEXT_PKT_NUM]
        image = bytearray(encode_header(PacketKind.ONE_RTT, pkt_num))
        written: List[Tuple[object, Optional[int]]] = []
        fill_owner: Optional[int] = None
        types = self.registered_frame_types() if frame_types is None else list(frame_types)
        self.halted = False

        for frame_type in types:
            frame = self._prepare(frame_type)
            if frame is HALT:
                self.halted = True
                logger.debug(f"Mock send halted by frame 0x{frame_type:x}")
                return None
            if frame is None:
                continue
            if isinstance(frame, fr.Padding) and frame.length == 0:
                fill_owner = frame_type
                continue
            wire_len = self.dispatch.wire_len(frame_type, frame)
            if wire_len is None or wire_len <= 0 or wire_len > self.mtu - len(image):
                continue
            octets = self.dispatch.write(frame_type, frame, wire_len)
            if octets is None:
                continue
            image += octets
            written.append((frame, frame_type))

        for frame in list(native_frames) + self.path_responses:
            image += self.dispatch.native_write(frame)
            written.append((frame, None))
        self.path_responses = []

        if not any(not isinstance(frame, fr.Padding) for frame, _ in written):
            return None
        if fill_owner is not None:
            padding = fr.Padding(self.mtu - len(image))
            image += self.dispatch.native_write(padding)
            written.append((padding, fill_owner))

        for frame, frame_type in written:
            if frame_type is None:
                continue
            if self.dispatch.provides(RoutineKind.ON_FRAME_RESERVED, frame_type):
                self.dispatch.on_reserved(frame_type, frame, pkt_num)
            else:
                self._native_reserved(frame)
        self.values[F.NEXT_PKT_NUM] = pkt_num + 1
        return MockPacket(pkt_num, bytes(image), written)

    def acknowledge(self, packet: MockPacket, acknowledged: bool = True) -> None:
        """Report the fate of every plugin frame in `packet` through NotifyFrame."""
        for frame, frame_type in packet.frames:
            if frame_type is not None:
                self.dispatch.notify(frame_type, frame, acknowledged)

    # ------------------------------------------------------------------
    # Receiving
    # ------------------------------------------------------------------

    def receive(self, image: bytes) -> List[object]:
        """
        Parse every frame of `image`, then process them in order.

        Raises:
            DecodeError: A frame could not be parsed
        """
        _, pkt_num, offset = decode_header(image)
        parsed = []
        while offset < len(image):
            frame_type = fr.peek_frame_type(image, offset)
            result = self.dispatch.parse(frame_type, image, offset)
            if result is None:
                if frame_type > fr.CORE_FRAME_TYPE_MAX:
                    raise DecodeError(f"unknown frame type 0x{frame_type:x}")
                result = fr.parse_frame(image, offset)
            frame, used = result
            parsed.append(frame)
            offset += used
        for frame in parsed:
            self.dispatch.process(frame, self.now, self._native_process)
        self.values[F.LARGEST_RX_PKT_NUM] = max(self.values[F.LARGEST_RX_PKT_NUM], pkt_num)
        return parsed

    # ------------------------------------------------------------------
    # MAX_DATA cycle
    # ------------------------------------------------------------------

    def arm_max_data(self, consumed: int = 600_000, limit: int = 1_048_576) -> None:
        """Put the receive window in a state where MAX_DATA is due."""
        self.values[F.RX_DATA] = consumed
        self.values[F.MAX_RX_DATA] = limit

    def max_data_cycle(self, peer: "MockHost") -> bytes:
        """
        Send one MAX_DATA to `peer` and have it processed there.

        Returns:
            The wire image that crossed
        """
        self.arm_max_data()
        packet = self.send_frames([MAX_DATA])
        if packet is None:
            raise RuntimeError("MAX_DATA was not sent")
        peer.receive(packet.image)
        return packet.image

