"""
Pseudo-handshake state for the beta backend: the CRYPTO message we send and
the transport parameters the peer sent.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

from src.common.codec import decode_tp_list, encode_tp_list, tp_int, tp_int_value
from src.common.endpoint import NATIVE_TP_TYPES, TP_IDLE_TIMEOUT, TP_INITIAL_MAX_DATA, TP_MAX_ACK_DELAY
from src.common.errors import DecodeError, TransportError, TransportErrorCode
from src.common.recovery import MS
from src.common.values import TransportParameter

logger = logging.getLogger(__name__)


@dataclass
class PeerParameters:
    """Native values the peer advertised; None when absent. `extensions` go to plugins."""
    max_data: Optional[int] = None
    idle_timeout: Optional[int] = None
    max_ack_delay: Optional[int] = None
    extensions: List[TransportParameter] = field(default_factory=list)


def decode_peer_parameters(message: bytes) -> PeerParameters:
    """
    Raises:
        TransportError: TRANSPORT_PARAMETER_ERROR on a malformed list
    """
    peer = PeerParameters()
    try:
        for tp in decode_tp_list(message):
            if tp.param_type == TP_INITIAL_MAX_DATA:
                peer.max_data = max(peer.max_data or 0, tp_int_value(tp))
            elif tp.param_type == TP_IDLE_TIMEOUT:
                idle = tp_int_value(tp) * MS
                if idle:
                    peer.idle_timeout = idle if peer.idle_timeout is None else min(peer.idle_timeout, idle)
            elif tp.param_type == TP_MAX_ACK_DELAY:
                peer.max_ack_delay = tp_int_value(tp) * MS
            if tp.param_type not in NATIVE_TP_TYPES:
                peer.extensions.append(tp)
    except DecodeError as e:
        raise TransportError(TransportErrorCode.TRANSPORT_PARAMETER_ERROR, str(e)) from e
    return peer


class Handshake:
    def __init__(self, is_server: bool):
        self.is_server = is_server
        self.message = b""
        self.pending = False
        self.peer: Optional[PeerParameters] = None

    @staticmethod
    def encode(max_rx_data: int, idle_timeout: int, max_ack_delay: int,
               extensions: List[TransportParameter]) -> bytes:
        params = [
            TransportParameter(TP_INITIAL_MAX_DATA, tp_int(max_rx_data)),
            TransportParameter(TP_IDLE_TIMEOUT, tp_int(idle_timeout // MS)),
            TransportParameter(TP_MAX_ACK_DELAY, tp_int(max_ack_delay // MS)),
        ]
        return encode_tp_list(params + list(extensions))

    def queue(self, message: bytes) -> None:
        self.message = message
        self.pending = True

    def on_lost(self, established: bool) -> None:
        if self.is_server or not established:
            self.pending = True
