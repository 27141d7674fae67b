"""Wire protocol shared by devices, operators, and the relay server.

Every frame is one UTF-8 JSON object on a single line, ``type`` field
first, terminated by a single LF, carried over any reliable ordered
byte stream (TCP, in-memory duplex, or a WebSocket text message per
frame). Lines longer than MAX_FRAME_BYTES are a connection-level
framing fault, not a decodable frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Any, ClassVar, Union

PROTO_VERSION = 1
MAX_FRAME_BYTES = 4096


class DecodeError(Exception):
    """A frame that cannot be turned into a Message.

    ``kind`` is one of "syntax", "unknown_type", "missing_field",
    "bad_field"; ``field`` names the offender for the last two.
    """

    def __init__(self, kind: str, detail: str, field: str | None = None):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail
        self.field = field


@dataclass(frozen=True)
class Login:
    TYPE: ClassVar[str] = "login"
    role: str  # "device" | "operator"
    auth: str
    proto: int = PROTO_VERSION


@dataclass(frozen=True)
class LoginAck:
    TYPE: ClassVar[str] = "login_ack"
    ok: bool
    id: str = ""
    error: str | None = None


@dataclass(frozen=True)
class Notify:
    TYPE: ClassVar[str] = "notify"
    seq: int
    ts_ms: int
    text: str


@dataclass(frozen=True)
class NotifyAck:
    TYPE: ClassVar[str] = "notify_ack"
    seq: int


@dataclass(frozen=True)
class Heartbeat:
    TYPE: ClassVar[str] = "heartbeat"
    ts_ms: int


@dataclass(frozen=True)
class Command:
    TYPE: ClassVar[str] = "command"
    device_id: str
    pin: str
    value: int
    cmd_id: int


@dataclass(frozen=True)
class HwWrite:
    TYPE: ClassVar[str] = "hw_write"
    pin: str
    value: int
    cmd_id: int


@dataclass(frozen=True)
class CommandAck:
    TYPE: ClassVar[str] = "command_ack"
    cmd_id: int
    delivered: bool


@dataclass(frozen=True)
class Subscribe:
    TYPE: ClassVar[str] = "subscribe"
    devices: tuple[str, ...]  # device-id patterns, "*" matches all


@dataclass(frozen=True)
class Event:
    TYPE: ClassVar[str] = "event"
    event_id: int
    device_id: str
    ts_ms: int  # server-assigned, authoritative for ordering
    device_ts_ms: int
    text: str


@dataclass(frozen=True)
class HistoryRequest:
    TYPE: ClassVar[str] = "history_request"
    from_ms: int
    to_ms: int
    limit: int
    device_id: str | None = None


@dataclass(frozen=True)
class HistoryResponse:
    TYPE: ClassVar[str] = "history_response"
    events: tuple[Event, ...]


@dataclass(frozen=True)
class Error:
    TYPE: ClassVar[str] = "error"
    code: str
    detail: str


Message = Union[
    Login, LoginAck, Notify, NotifyAck, Heartbeat, Command, HwWrite,
    CommandAck, Subscribe, Event, HistoryRequest, HistoryResponse, Error,
]

MESSAGE_TYPES: dict[str, type] = {
    cls.TYPE: cls
    for cls in (
        Login, LoginAck, Notify, NotifyAck, Heartbeat, Command, HwWrite,
        CommandAck, Subscribe, Event, HistoryRequest, HistoryResponse, Error,
    )
}

# Fields that may be absent on the wire, per type.
_OPTIONAL: dict[type, frozenset[str]] = {
    LoginAck: frozenset({"id", "error"}),
    HistoryRequest: frozenset({"device_id"}),
}


def json_line(obj: dict[str, Any]) -> bytes:
    """Serialize one object with the wire conventions: compact, UTF-8, LF."""
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"


def to_wire_dict(msg: Message) -> dict[str, Any]:
    """Message as a plain dict, ``type`` first, None-valued optionals omitted."""
    out: dict[str, Any] = {"type": msg.TYPE}
    for f in fields(msg):
        value = getattr(msg, f.name)
        if value is None:
            continue
        if isinstance(msg, HistoryResponse) and f.name == "events":
            value = [to_wire_dict(ev) for ev in value]
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def encode(msg: Message) -> bytes:
    return json_line(to_wire_dict(msg))


def decode(line: bytes | str) -> Message:
    """Inverse of encode for one frame (trailing LF tolerated).

    Unknown extra fields are ignored; missing or wrong-typed required
    fields raise DecodeError.
    """
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("syntax", f"not valid UTF-8: {exc}") from exc
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DecodeError("syntax", f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError("syntax", "frame is not a JSON object")
    return from_wire_dict(obj)


def from_wire_dict(obj: dict[str, Any]) -> Message:
    type_name = obj.get("type")
    if type_name is None:
        raise DecodeError("missing_field", "frame has no type field", field="type")
    if not isinstance(type_name, str) or type_name not in MESSAGE_TYPES:
        raise DecodeError("unknown_type", f"unknown message type {type_name!r}")
    cls = MESSAGE_TYPES[type_name]
    optional = _OPTIONAL.get(cls, frozenset())

    kwargs: dict[str, Any] = {}
    for f in fields(cls):
        if f.name not in obj:
            if f.name in optional:
                continue
            raise DecodeError("missing_field", f"{type_name} missing {f.name}", field=f.name)
        kwargs[f.name] = _check_field(cls, type_name, f.name, obj[f.name])
    return cls(**kwargs)


_INT_FIELDS = {"seq", "ts_ms", "device_ts_ms", "value", "cmd_id", "event_id",
               "proto", "from_ms", "to_ms", "limit"}
_STR_FIELDS = {"role", "auth", "text", "device_id", "pin", "id", "error", "code", "detail"}
_BOOL_FIELDS = {"ok", "delivered"}


def _check_field(cls: type, type_name: str, name: str, value: Any) -> Any:
    def bad(expected: str) -> DecodeError:
        return DecodeError("bad_field", f"{type_name}.{name} must be {expected}", field=name)

    if name in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise bad("a boolean")
        return value
    if name in _INT_FIELDS:
        # bool is an int subclass; reject it explicitly
        if not isinstance(value, int) or isinstance(value, bool):
            raise bad("an integer")
        return value
    if name in _STR_FIELDS:
        if not isinstance(value, str):
            raise bad("a string")
        if name == "role" and value not in ("device", "operator"):
            raise bad('"device" or "operator"')
        return value
    if name == "devices":
        if not isinstance(value, list) or not all(isinstance(p, str) for p in value):
            raise bad("a list of strings")
        return tuple(value)
    if name == "events":
        if not isinstance(value, list):
            raise bad("a list of event objects")
        events = []
        for entry in value:
            if not isinstance(entry, dict):
                raise bad("a list of event objects")
            nested = from_wire_dict(entry)
            if not isinstance(nested, Event):
                raise bad("a list of event objects")
            events.append(nested)
        return tuple(events)
    raise AssertionError(f"unhandled field {cls.__name__}.{name}")


def split_frames(data: bytes) -> list[bytes]:
    """Split a byte stream into LF-terminated frames (final partial kept out)."""
    return data.split(b"\n")[:-1]
