"""
Minimal WebAssembly binary helpers: section walking and custom sections.
"""

import json
import logging
from typing import Any, Dict, Iterator, Optional, Tuple

from src.common.abi import MANIFEST_SECTION

logger = logging.getLogger(__name__)

WASM_HEADER = b"\x00asm\x01\x00\x00\x00"
CUSTOM_SECTION_ID = 0


def encode_leb128(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_leb128(data: bytes, offset: int) -> Tuple[int, int]:
    """Returns (value, consumed); raises ValueError when truncated."""
    value = shift = 0
    start = offset
    while True:
        if offset >= len(data):
            raise ValueError("truncated LEB128")
        byte = data[offset]
        offset += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, offset - start
        shift += 7
        if shift > 35:
            raise ValueError("LEB128 too long for u32")


def iter_sections(module: bytes) -> Iterator[Tuple[int, int, int]]:
    """Yield (section id, payload start, payload end) for each section."""
    if not module.startswith(WASM_HEADER):
        raise ValueError("not a WebAssembly binary module")
    offset = len(WASM_HEADER)
    while offset < len(module):
        section_id = module[offset]
        size, used = decode_leb128(module, offset + 1)
        start = offset + 1 + used
        end = start + size
        if end > len(module):
            raise ValueError(f"section {section_id} overruns the module")
        yield section_id, start, end
        offset = end


def read_custom_section(module: bytes, name: str) -> Optional[bytes]:
    """Payload of the first custom section called `name`, or None."""
    for section_id, start, end in iter_sections(module):
        if section_id != CUSTOM_SECTION_ID:
            continue
        name_len, used = decode_leb128(module, start)
        name_start = start + used
        if module[name_start:name_start + name_len].decode("utf-8", errors="replace") == name:
            return bytes(module[name_start + name_len:end])
    return None


def append_custom_section(module: bytes, name: str, payload: bytes) -> bytes:
    encoded_name = name.encode("utf-8")
    body = encode_leb128(len(encoded_name)) + encoded_name + payload
    return module + bytes([CUSTOM_SECTION_ID]) + encode_leb128(len(body)) + body


def read_manifest(module: bytes) -> Optional[Dict[str, Any]]:
    """Decode the embedded plugin manifest; None when absent or unreadable."""
    try:
        payload = read_custom_section(module, MANIFEST_SECTION)
    except ValueError as e:
        logger.debug(f"Cannot walk module sections: {e}")
        return None
    if payload is None:
        return None
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        logger.warning(f"Ignoring malformed {MANIFEST_SECTION} section: {e}")
        return None
