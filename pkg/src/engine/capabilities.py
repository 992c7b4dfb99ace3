"""
Byte capabilities: bounded, revocable views of host buffers handed to plugins.
"""

import logging
from dataclasses import dataclass
from typing import Dict

from src.common.errors import CapabilityRangeError, InvalidCapability
from src.common.values import BytesCapability

logger = logging.getLogger(__name__)


@dataclass
class _Grant:
    buffer: bytearray
    max_read: int
    max_write: int
    written: int = 0


class CapabilityTable:
    """Per-connection table; tags increase monotonically and are never reused."""

    def __init__(self):
        self._grants: Dict[int, _Grant] = {}
        self._next_tag = 1

    def expose(self, buffer: bytearray, max_read: int, max_write: int) -> BytesCapability:
        max_read = min(max_read, len(buffer))
        max_write = min(max_write, len(buffer))
        tag = self._next_tag
        self._next_tag += 1
        self._grants[tag] = _Grant(buffer, max_read, max_write)
        return BytesCapability(tag, max_read, max_write)

    def _grant(self, tag: int) -> _Grant:
        grant = self._grants.get(tag)
        if grant is None:
            raise InvalidCapability(f"unknown or expired capability tag {tag}")
        return grant

    def read(self, tag: int, offset: int, length: int) -> bytes:
        grant = self._grant(tag)
        if offset < 0 or length < 0 or offset + length > grant.max_read:
            raise CapabilityRangeError(
                f"read [{offset}, {offset + length}) beyond max_read {grant.max_read}")
        return bytes(grant.buffer[offset:offset + length])

    def write(self, tag: int, offset: int, data: bytes) -> int:
        grant = self._grant(tag)
        end = offset + len(data)
        if offset < 0 or end > grant.max_write:
            raise CapabilityRangeError(f"write [{offset}, {end}) beyond max_write {grant.max_write}")
        grant.buffer[offset:end] = data
        grant.written = max(grant.written, end)
        return len(data)

    def written(self, tag: int) -> int:
        """High-water mark of octets written through `tag`."""
        return self._grant(tag).written

    def snapshot(self) -> Dict[int, int]:
        return {tag: grant.written for tag, grant in self._grants.items()}

    def revoke_all(self) -> Dict[int, int]:
        """Invalidate every live capability; returns tag -> written high-water mark."""
        written = {tag: grant.written for tag, grant in self._grants.items()}
        self._grants.clear()
        return written

    def __len__(self) -> int:
        return len(self._grants)
