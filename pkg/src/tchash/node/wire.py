"""ARCP framing and message payloads.

A frame is ``b"ARCP" | u8 kind | u32 length | payload`` (little-endian).
Payload layouts:

    SubmitRecord   record bytes
    RecordAck      uid[16] | u8 status | u64 height | utf-8 detail
    ProposeBlock   block bytes
    ChainRequest   u8 mode | mode 0: hash[32] | u16 limit
                             mode 1: uid[16]
    ChainResponse  u8 mode | mode 0: u32 count | (u32 len | block)*
                             mode 1: u8 found | record bytes
    PeerHello      u16 len | node id utf-8 | u64 height | tip[32]

Unknown kinds are skipped with a warning. A bad magic or a length above
``MAX_FRAME`` raises :class:`FrameError`, which callers treat as a reason to
drop the connection.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass

from ..errors import FrameError, LedgerError
from ..ledger import ChainRecord, LedgerBlock

log = logging.getLogger(__name__)

MAGIC = b"ARCP"
FRAME_HEADER = struct.Struct("<4sBI")
MAX_FRAME = 64 << 20


class Kind(enum.IntEnum):
    SUBMIT_RECORD = 1
    RECORD_ACK = 2
    PROPOSE_BLOCK = 3
    CHAIN_REQUEST = 4
    CHAIN_RESPONSE = 5
    PEER_HELLO = 6


class AckStatus(enum.IntEnum):
    ACCEPTED = 0
    OVERSIZE = 1
    DUPLICATE_UID = 2
    UNAUTHORIZED = 3
    INVALID = 4


@dataclass(frozen=True)
class WireMessage:
    kind: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_frame(self.kind, self.payload)


def encode_frame(kind: int, payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise FrameError(f"payload of {len(payload)} bytes exceeds the frame limit")
    return FRAME_HEADER.pack(MAGIC, int(kind), len(payload)) + payload


class FrameDecoder:
    """Incremental decoder; feed bytes, collect complete messages."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= FRAME_HEADER.size:
            magic, kind, n = FRAME_HEADER.unpack_from(self._buf)
            if magic != MAGIC:
                raise FrameError(f"bad frame magic {bytes(magic)!r}")
            if n > self.max_frame:
                raise FrameError(f"declared frame length {n} exceeds {self.max_frame}")
            end = FRAME_HEADER.size + n
            if len(self._buf) < end:
                break
            payload = bytes(self._buf[FRAME_HEADER.size:end])
            del self._buf[:end]
            if kind not in Kind._value2member_map_:
                log.warning("ignoring frame of unknown kind %d (%d bytes)", kind, n)
                continue
            out.append(WireMessage(Kind(kind), payload))
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)


def decode_frames(data: bytes) -> list[WireMessage]:
    """Decode a byte string holding whole frames only."""
    dec = FrameDecoder()
    msgs = dec.feed(data)
    if dec.buffered:
        raise FrameError(f"{dec.buffered} trailing bytes do not form a frame")
    return msgs


# payload helpers

def submit_record(record: ChainRecord) -> WireMessage:
    return WireMessage(Kind.SUBMIT_RECORD, record.to_bytes())


def record_ack(uid: bytes, status: AckStatus, height: int = 0, detail: str = "") -> WireMessage:
    return WireMessage(Kind.RECORD_ACK, bytes(uid) + struct.pack("<BQ", status, height) + detail.encode())


def parse_record_ack(payload: bytes) -> tuple[bytes, AckStatus, int, str]:
    if len(payload) < 25:
        raise FrameError("record ack is truncated")
    status, height = struct.unpack_from("<BQ", payload, 16)
    return payload[:16], AckStatus(status), height, payload[25:].decode(errors="replace")


def propose_block(block: LedgerBlock) -> WireMessage:
    return WireMessage(Kind.PROPOSE_BLOCK, block.to_bytes())


def chain_request(block_hash: bytes, limit: int = 256) -> WireMessage:
    return WireMessage(Kind.CHAIN_REQUEST, b"\x00" + bytes(block_hash) + struct.pack("<H", limit))


def record_request(uid: bytes) -> WireMessage:
    return WireMessage(Kind.CHAIN_REQUEST, b"\x01" + bytes(uid))


def parse_chain_request(payload: bytes):
    """``(0, hash, limit)`` or ``(1, uid, None)``."""
    if payload[:1] == b"\x00" and len(payload) == 35:
        return 0, payload[1:33], struct.unpack_from("<H", payload, 33)[0]
    if payload[:1] == b"\x01" and len(payload) == 17:
        return 1, payload[1:17], None
    raise FrameError("malformed chain request")


def chain_response(blocks) -> WireMessage:
    parts = [b"\x00", struct.pack("<I", len(blocks))]
    for b in blocks:
        raw = b.to_bytes()
        parts += [struct.pack("<I", len(raw)), raw]
    return WireMessage(Kind.CHAIN_RESPONSE, b"".join(parts))


def record_response(record: ChainRecord | None) -> WireMessage:
    body = b"\x01\x00" if record is None else b"\x01\x01" + record.to_bytes()
    return WireMessage(Kind.CHAIN_RESPONSE, body)


def parse_chain_response(payload: bytes):
    """``(0, [blocks])`` or ``(1, record_or_None)``."""
    try:
        if payload[:1] == b"\x00":
            (count,) = struct.unpack_from("<I", payload, 1)
            pos, blocks = 5, []
            for _ in range(count):
                (n,) = struct.unpack_from("<I", payload, pos)
                if pos + 4 + n > len(payload):
                    raise FrameError("block extends past the response")
                blocks.append(LedgerBlock.from_bytes(payload[pos + 4:pos + 4 + n]))
                pos += 4 + n
            return 0, blocks
        if payload[:1] == b"\x01" and len(payload) >= 2:
            return 1, (ChainRecord.from_bytes(payload[2:]) if payload[1] else None)
    except (struct.error, LedgerError) as exc:
        raise FrameError(f"malformed chain response: {exc}") from None
    raise FrameError("malformed chain response")


def peer_hello(node_id: str, height: int, tip: bytes) -> WireMessage:
    nid = node_id.encode()
    return WireMessage(Kind.PEER_HELLO, struct.pack("<H", len(nid)) + nid + struct.pack("<Q", height) + tip)


def parse_peer_hello(payload: bytes) -> tuple[str, int, bytes]:
    try:
        (n,) = struct.unpack_from("<H", payload)
        nid = payload[2:2 + n].decode()
        (height,) = struct.unpack_from("<Q", payload, 2 + n)
        tip = payload[10 + n:42 + n]
    except (struct.error, UnicodeDecodeError):
        raise FrameError("malformed peer hello") from None
    if len(tip) != 32 or len(payload) != 42 + n:
        raise FrameError("malformed peer hello")
    return nid, height, tip
