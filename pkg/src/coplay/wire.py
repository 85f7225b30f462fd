"""Length-prefixed structured text frames.

Every frame on a session or registry connection is the ASCII decimal byte
length of the body, one newline, then the body: canonical JSON (sorted
keys, compact separators, UTF-8). Field names are lowercase snake_case.
Decoders keep unknown fields and handlers ignore them, so old nodes can
talk to newer ones. See docs/wire.md for byte-level examples.
"""

from __future__ import annotations

import json
from typing import Any, Dict, List, Optional

from .model import SessionError
from .records import canonical_json

MAX_FRAME_BYTES = 64 * 1024
SESSION_FRAME_LIMIT = 1024  # every session message must serialize under this

# Session message types.
HELLO = "hello"
SNAPSHOT_REQUEST = "snapshot_request"
SYNC_SNAPSHOT = "sync_snapshot"
EVENT = "event"
CONTROL_REQUEST = "control_request"
CONTROL_GRANTED = "control_granted"
CONTROL_DENIED = "control_denied"
CONTROL_SUPERSEDED = "control_superseded"
CONTROL_TRANSFER = "control_transfer"
HEARTBEAT = "heartbeat"
CHAT = "chat"
GOODBYE = "goodbye"

SESSION_TYPES = frozenset(
    {
        HELLO,
        SNAPSHOT_REQUEST,
        SYNC_SNAPSHOT,
        EVENT,
        CONTROL_REQUEST,
        CONTROL_GRANTED,
        CONTROL_DENIED,
        CONTROL_SUPERSEDED,
        CONTROL_TRANSFER,
        HEARTBEAT,
        CHAT,
        GOODBYE,
    }
)

# Link plumbing and registry operations share the same frame shape.
ACK = "ack"
REPLY = "reply"

# Frames that only keep connections honest; excluded from the control-byte
# budget because their count grows with wall time, not with user activity.
LIVENESS_TYPES = frozenset({HEARTBEAT, ACK})


class FrameTooLarge(SessionError):
    code = "FrameTooLarge"


class BadFrame(SessionError):
    code = "BadFrame"


def encode_frame(record: Dict[str, Any]) -> bytes:
    body = canonical_json(record).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise FrameTooLarge("frame body of %d bytes" % len(body))
    return b"%d\n%s" % (len(body), body)


class FrameDecoder:
    """Incremental decoder for a byte stream of length-prefixed frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Dict[str, Any]]:
        self._buf.extend(data)
        out: List[Dict[str, Any]] = []
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                if len(self._buf) > 20:
                    raise BadFrame("length prefix too long")
                return out
            prefix = bytes(self._buf[:nl])
            try:
                n = int(prefix)
            except ValueError:
                raise BadFrame("bad length prefix %r" % prefix)
            if n < 0 or n > MAX_FRAME_BYTES:
                raise BadFrame("frame length %d out of range" % n)
            if len(self._buf) < nl + 1 + n:
                return out
            body = bytes(self._buf[nl + 1 : nl + 1 + n])
            del self._buf[: nl + 1 + n]
            try:
                rec = json.loads(body.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise BadFrame("unparseable frame body")
            if not isinstance(rec, dict) or "type" not in rec:
                raise BadFrame("frame is not a typed record")
            out.append(rec)


def decode_frames(data: bytes) -> List[Dict[str, Any]]:
    dec = FrameDecoder()
    return dec.feed(data)


def make_frame(
    ftype: str,
    src: str,
    *,
    group_id: Optional[str] = None,
    sender: Optional[str] = None,
    epoch: Optional[int] = None,
    payload: Optional[Dict[str, Any]] = None,
    **extra: Any,
) -> Dict[str, Any]:
    """Build a frame record. seq / rel / ack stamps are added by the link
    layer on send; sent_at is stamped by the node driver."""
    frame: Dict[str, Any] = {"type": ftype, "src": src}
    if group_id is not None:
        frame["group_id"] = group_id
    if sender is not None:
        frame["sender"] = sender
    if epoch is not None:
        frame["epoch"] = epoch
    if payload is not None:
        frame["payload"] = payload
    frame.update(extra)
    return frame


def frame_size(frame: Dict[str, Any]) -> int:
    return len(encode_frame(frame))
