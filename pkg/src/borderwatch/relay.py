"""Relay server core: sessions, persistence, fanout, command routing.

The core is transport-agnostic. A transport hands it a Channel per
connection (anything with send/close), calls handle_frame for every
decoded frame, and disconnect when the peer goes away. The TCP and
WebSocket fronts in the live server and the in-memory channels in the
simulator all drive this same object, so behavior is identical across
transports.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from .protocol import (
    Command, CommandAck, Error, Event, Heartbeat, HistoryRequest,
    HistoryResponse, HwWrite, Login, LoginAck, Message, Notify, NotifyAck,
    Subscribe,
)
from .store import CommandAudit, EventStore, StoreError

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "{text}"


class Channel(Protocol):
    def send(self, msg: Message) -> None: ...
    def close(self) -> None: ...


@dataclass(frozen=True)
class DeviceInfo:
    device_id: str
    display_name: str = ""


@dataclass
class ServerConfig:
    """Contents of the server config file (JSON)."""

    port: int = 7420
    host: str = "127.0.0.1"
    store_path: str = "events.log"
    template: str = DEFAULT_TEMPLATE
    devices: dict[str, DeviceInfo] = field(default_factory=dict)     # auth token -> device
    operators: dict[str, str] = field(default_factory=dict)          # auth token -> operator id
    static_dir: str | None = None

    @classmethod
    def load(cls, path: str | Path) -> ServerConfig:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        devices = {}
        for entry in raw.get("devices", []):
            devices[entry["auth"]] = DeviceInfo(
                device_id=entry["device_id"],
                display_name=entry.get("display_name", entry["device_id"]),
            )
        operators = {entry["auth"]: entry["operator_id"] for entry in raw.get("operators", [])}
        ids = [d.device_id for d in devices.values()]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate device_id in config")
        return cls(
            port=raw.get("port", 7420),
            host=raw.get("host", "127.0.0.1"),
            store_path=raw.get("store", "events.log"),
            template=raw.get("template", DEFAULT_TEMPLATE),
            devices=devices,
            operators=operators,
            static_dir=raw.get("static_dir"),
        )


def render_template(template: str, device_id: str, text: str) -> str:
    """Fill {device} and {text}; anything else renders literally."""
    return re.sub(
        r"\{(device|text)\}",
        lambda m: device_id if m.group(1) == "device" else text,
        template,
    )


@dataclass
class Connection:
    """Per-connection state, from accept to close."""

    channel: Channel
    role: str | None = None       # None until a successful login
    party_id: str | None = None   # device_id or operator_id
    subscriptions: tuple[str, ...] = ()
    closed: bool = False


def _now_ms() -> int:
    return int(time.time() * 1000)


class RelayCore:
    def __init__(self, devices: dict[str, DeviceInfo], operator_tokens: dict[str, str],
                 store: EventStore, template: str = DEFAULT_TEMPLATE,
                 clock: Callable[[], int] = _now_ms):
        self._devices = dict(devices)
        self._operator_tokens = dict(operator_tokens)
        self._known_device_ids = {d.device_id for d in devices.values()}
        self._store = store
        self._template = template
        self._clock = clock
        self._device_sessions: dict[str, Connection] = {}
        self._operator_sessions: dict[str, Connection] = {}

    @property
    def store(self) -> EventStore:
        return self._store

    def set_template(self, template: str) -> None:
        self._template = template

    def connect(self, channel: Channel) -> Connection:
        return Connection(channel=channel)

    def disconnect(self, conn: Connection) -> None:
        conn.closed = True
        if conn.role == "device" and self._device_sessions.get(conn.party_id) is conn:
            del self._device_sessions[conn.party_id]
        elif conn.role == "operator" and self._operator_sessions.get(conn.party_id) is conn:
            del self._operator_sessions[conn.party_id]

    def device_online(self, device_id: str) -> bool:
        return device_id in self._device_sessions

    def handle_frame(self, conn: Connection, msg: Message) -> None:
        if conn.closed:
            return
        if isinstance(msg, Login):
            self._handle_login(conn, msg)
            return
        if conn.role is None:
            # Nothing from an unauthenticated connection is ever forwarded.
            self._fail(conn, "not_logged_in", "first frame must be login")
            return
        if isinstance(msg, Heartbeat):
            return
        if conn.role == "device" and isinstance(msg, Notify):
            self._handle_notify(conn, msg)
        elif conn.role == "operator" and isinstance(msg, Command):
            self._handle_command(conn, msg)
        elif conn.role == "operator" and isinstance(msg, HistoryRequest):
            self._handle_history(conn, msg)
        elif conn.role == "operator" and isinstance(msg, Subscribe):
            conn.subscriptions = tuple(msg.devices)
        else:
            conn.channel.send(Error(code="not_allowed",
                                    detail=f"{msg.TYPE} not allowed for role {conn.role}"))

    # -- login ---------------------------------------------------------

    def _handle_login(self, conn: Connection, msg: Login) -> None:
        if conn.role is not None:
            self._fail(conn, "protocol", "second login on one connection")
            return
        if msg.proto != 1:
            conn.channel.send(LoginAck(ok=False, error="bad_proto"))
            self._close(conn)
            return
        if msg.role == "device":
            info = self._devices.get(msg.auth)
            if info is None:
                conn.channel.send(LoginAck(ok=False, error="bad_auth"))
                self._close(conn)
                return
            self._evict(self._device_sessions, info.device_id)
            conn.role, conn.party_id = "device", info.device_id
            self._device_sessions[info.device_id] = conn
            conn.channel.send(LoginAck(ok=True, id=info.device_id))
        else:
            operator_id = self._operator_tokens.get(msg.auth)
            if operator_id is None:
                conn.channel.send(LoginAck(ok=False, error="bad_auth"))
                self._close(conn)
                return
            self._evict(self._operator_sessions, operator_id)
            conn.role, conn.party_id = "operator", operator_id
            self._operator_sessions[operator_id] = conn
            conn.channel.send(LoginAck(ok=True, id=operator_id))

    def _evict(self, sessions: dict[str, Connection], party_id: str) -> None:
        old = sessions.pop(party_id, None)
        if old is not None:
            old.channel.send(Error(code="evicted", detail="newer session took over"))
            self._close(old)

    # -- device uplink ---------------------------------------------------

    def _handle_notify(self, conn: Connection, msg: Notify) -> None:
        server_ts = self._clock()
        try:
            event_id = self._store.append_event(
                device_id=conn.party_id, device_seq=msg.seq,
                device_ts_ms=msg.ts_ms, server_ts_ms=server_ts, text=msg.text,
            )
        except StoreError as exc:
            # No ack: the device keeps the notify queued and retries.
            logger.error("store append failed, withholding ack: %s", exc)
            return
        if event_id is not None:
            event = Event(
                event_id=event_id, device_id=conn.party_id, ts_ms=server_ts,
                device_ts_ms=msg.ts_ms,
                text=render_template(self._template, conn.party_id, msg.text),
            )
            for op_conn in list(self._operator_sessions.values()):
                if _matches(op_conn.subscriptions, conn.party_id):
                    op_conn.channel.send(event)
        conn.channel.send(NotifyAck(seq=msg.seq))

    # -- operator downlink -------------------------------------------

    def _handle_command(self, conn: Connection, msg: Command) -> None:
        if msg.device_id not in self._known_device_ids:
            conn.channel.send(Error(code="no_such_device", detail=msg.device_id))
            return
        target = self._device_sessions.get(msg.device_id)
        delivered = target is not None
        if delivered:
            target.channel.send(HwWrite(pin=msg.pin, value=msg.value, cmd_id=msg.cmd_id))
        self._store.append_audit(CommandAudit(
            cmd_id=msg.cmd_id, operator_id=conn.party_id, device_id=msg.device_id,
            pin=msg.pin, value=msg.value, server_ts_ms=self._clock(),
            delivered=delivered,
        ))
        conn.channel.send(CommandAck(cmd_id=msg.cmd_id, delivered=delivered))

    def _handle_history(self, conn: Connection, msg: HistoryRequest) -> None:
        if msg.from_ms > msg.to_ms or msg.limit < 1:
            conn.channel.send(Error(code="bad_request", detail="bad range or limit"))
            return
        events = self._store.query(device_id=msg.device_id, from_ms=msg.from_ms,
                                   to_ms=msg.to_ms, limit=msg.limit)
        conn.channel.send(HistoryResponse(events=tuple(
            Event(event_id=e.event_id, device_id=e.device_id, ts_ms=e.server_ts_ms,
                  device_ts_ms=e.device_ts_ms, text=e.text)
            for e in events
        )))

    # -- plumbing --------------------------------------------------------

    def _fail(self, conn: Connection, code: str, detail: str) -> None:
        conn.channel.send(Error(code=code, detail=detail))
        self._close(conn)

    def _close(self, conn: Connection) -> None:
        self.disconnect(conn)
        conn.channel.close()


def _matches(patterns: tuple[str, ...], device_id: str) -> bool:
    return any(fnmatch.fnmatchcase(device_id, pat) for pat in patterns)
