"""Length-prefixed JSON framing for master <-> worker traffic.

Frame layout: ``[len: u32 big-endian][body: UTF-8 JSON object]``. Bodies are
canonical JSON (sorted keys, no whitespace) so equal messages encode to equal
bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, Iterator

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024


class ProtocolError(Exception):
    """Malformed frame or message. ``offset`` is the stream offset of the frame."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at stream offset {offset})")
        self.offset = offset


class Kind(str, Enum):
    REGISTER = "REGISTER"
    REGISTERED = "REGISTERED"
    REQUEST = "REQUEST"
    ASSIGN = "ASSIGN"
    NOWORK = "NOWORK"
    RESULT = "RESULT"
    ACK = "ACK"
    HEARTBEAT = "HEARTBEAT"
    DRAIN = "DRAIN"
    SHUTDOWN = "SHUTDOWN"


REQUIRED: dict[Kind, tuple[str, ...]] = {
    Kind.REGISTER: ("slots",),
    Kind.REGISTERED: ("worker_id",),
    Kind.REQUEST: ("worker_id",),
    Kind.ASSIGN: ("task_id", "calc_ids"),
    Kind.NOWORK: ("retry_after_s",),
    Kind.RESULT: ("worker_id", "task_id", "status"),
    Kind.ACK: ("task_id",),
    Kind.HEARTBEAT: ("worker_id",),
    Kind.DRAIN: (),
    Kind.SHUTDOWN: (),
}


def _is_str(v: Any) -> bool:
    return isinstance(v, str)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return (isinstance(v, (int, float))) and not isinstance(v, bool)


def _is_str_list(v: Any) -> bool:
    return isinstance(v, list) and all(isinstance(x, str) for x in v)


FIELD_TYPES = {
    "worker_id": _is_str,
    "slots": _is_int,
    "task_id": _is_str,
    "calc_ids": _is_str_list,
    "payload_ref": _is_str,
    "cost": _is_num,
    "status": lambda v: v in ("OK", "ERROR"),
    "elapsed_s": _is_num,
    "retry_after_s": _is_num,
    "busy_task_ids": _is_str_list,
    "reason": _is_str,
    "error": _is_str,
    "warning": _is_str,
    "discarded": lambda v: isinstance(v, bool),
}


@dataclass(frozen=True)
class Message:
    kind: Kind
    worker_id: str | None = None
    slots: int | None = None
    task_id: str | None = None
    calc_ids: tuple[str, ...] | None = None
    payload_ref: str | None = None
    cost: float | None = None
    status: str | None = None
    elapsed_s: float | None = None
    retry_after_s: float | None = None
    busy_task_ids: tuple[str, ...] | None = None
    reason: str | None = None
    error: str | None = None
    warning: str | None = None
    discarded: bool | None = None
    protocol_version: int = PROTOCOL_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind(self.kind))
        for name in ("calc_ids", "busy_task_ids"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, tuple):
                object.__setattr__(self, name, tuple(v))

    def validate(self) -> None:
        for name in REQUIRED[self.kind]:
            if getattr(self, name) is None:
                raise ProtocolError(f"{self.kind.value} message requires field {name!r}")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind.value, "protocol_version": self.protocol_version}
        for f in fields(self):
            if f.name in ("kind", "protocol_version"):
                continue
            v = getattr(self, f.name)
            if v is None:
                continue
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_FIELD_NAMES = {f.name for f in fields(Message)} - {"kind", "protocol_version"}


def message_from_dict(obj: Any, offset: int | None = None) -> Message:
    if not isinstance(obj, dict):
        raise ProtocolError("message body is not a JSON object", offset)
    try:
        kind = Kind(obj.get("kind"))
    except ValueError:
        raise ProtocolError(f"unknown message kind {obj.get('kind')!r}", offset) from None
    version = obj.get("protocol_version")
    if not _is_int(version):
        raise ProtocolError("missing or non-integer protocol_version", offset)
    kwargs: dict[str, Any] = {}
    for name in _FIELD_NAMES:
        if name not in obj or obj[name] is None:
            continue
        v = obj[name]
        if not FIELD_TYPES[name](v):
            raise ProtocolError(f"field {name!r} has invalid value {v!r}", offset)
        kwargs[name] = v
    msg = Message(kind=kind, protocol_version=version, **kwargs)
    try:
        msg.validate()
    except ProtocolError as exc:
        raise ProtocolError(str(exc), offset) from None
    return msg


def encode_body(msg: Message) -> bytes:
    return json.dumps(msg.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_frame(msg: Message) -> bytes:
    msg.validate()
    body = encode_body(msg)
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"message body of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes, offset: int | None = None) -> Message:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"malformed message body: {exc}", offset) from None
    return message_from_dict(obj, offset)


class FrameDecoder:
    """Incremental decoder; one instance per connection.

    Bytes are buffered only up to one frame (header + MAX_FRAME); an oversized
    length prefix raises before any of its body is retained.
    """

    def __init__(self, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()
        self._offset = 0  # stream offset of _buf[0]

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[Message]:
        return list(self._iter_feed(data))

    def _iter_feed(self, data: bytes) -> Iterator[Message]:
        view = memoryview(data)
        while True:
            # top up to a full header, then to a full frame, never beyond
            if len(self._buf) < HEADER.size:
                take = HEADER.size - len(self._buf)
                self._buf += view[:take]
                view = view[take:]
                if len(self._buf) < HEADER.size:
                    return
            (length,) = HEADER.unpack_from(self._buf)
            if length > self.max_frame:
                raise ProtocolError(f"frame length {length} exceeds limit {self.max_frame}", self._offset)
            need = HEADER.size + length - len(self._buf)
            if need > 0:
                self._buf += view[:need]
                view = view[need:]
                if len(self._buf) < HEADER.size + length:
                    return
            body = bytes(self._buf[HEADER.size :])
            frame_offset = self._offset
            self._offset += len(self._buf)
            self._buf.clear()
            yield decode_body(body, frame_offset)


def decode_stream(chunks) -> Iterator[Message]:
    """Decode an iterable of byte chunks into messages."""
    dec = FrameDecoder()
    for chunk in chunks:
        yield from dec.feed(chunk)
