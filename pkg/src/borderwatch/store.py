"""Durable append-only log of intrusion events and command audits.

One JSON object per line, UTF-8, LF-terminated, so external tools can
tail the file. Event lines carry the same schema as the wire Event
frame plus the device sequence number used for deduplication; audit
lines use type "command_audit". Recovery replays the file, discards a
torn trailing record (truncating it away so later appends start on a
clean line), and resumes event ids after the highest recovered one.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from .protocol import json_line

logger = logging.getLogger(__name__)

MAX_TS = 2**62  # query default upper bound


class StoreError(Exception):
    """Storage I/O failure; callers must not ack the triggering message."""


@dataclass(frozen=True)
class IntrusionEvent:
    event_id: int
    device_id: str
    device_seq: int
    device_ts_ms: int
    server_ts_ms: int
    text: str

    def to_line_obj(self) -> dict:
        return {
            "type": "event",
            "event_id": self.event_id,
            "device_id": self.device_id,
            "ts_ms": self.server_ts_ms,
            "device_ts_ms": self.device_ts_ms,
            "text": self.text,
            "device_seq": self.device_seq,
        }

    @classmethod
    def from_line_obj(cls, obj: dict) -> IntrusionEvent:
        return cls(
            event_id=obj["event_id"],
            device_id=obj["device_id"],
            device_seq=obj["device_seq"],
            device_ts_ms=obj["device_ts_ms"],
            server_ts_ms=obj["ts_ms"],
            text=obj["text"],
        )


@dataclass(frozen=True)
class CommandAudit:
    cmd_id: int
    operator_id: str
    device_id: str
    pin: str
    value: int
    server_ts_ms: int
    delivered: bool

    def to_line_obj(self) -> dict:
        return {
            "type": "command_audit",
            "cmd_id": self.cmd_id,
            "operator_id": self.operator_id,
            "device_id": self.device_id,
            "pin": self.pin,
            "value": self.value,
            "ts_ms": self.server_ts_ms,
            "delivered": self.delivered,
        }

    @classmethod
    def from_line_obj(cls, obj: dict) -> CommandAudit:
        return cls(
            cmd_id=obj["cmd_id"],
            operator_id=obj["operator_id"],
            device_id=obj["device_id"],
            pin=obj["pin"],
            value=obj["value"],
            server_ts_ms=obj["ts_ms"],
            delivered=obj["delivered"],
        )


@dataclass
class RecoveryReport:
    recovered_events: int = 0
    recovered_audits: int = 0
    torn_records: int = 0


class EventStore:
    """Single-writer append log with an in-memory index for queries.

    Appends are serialized through a lock; queries copy the index under
    the lock and filter outside it. With ``batch_flush`` the per-append
    fsync is skipped (flush happens on close), trading durability of the
    last few records for throughput.
    """

    def __init__(self, path: str | Path | None, batch_flush: bool = False):
        self._path = Path(path) if path is not None else None
        self._batch_flush = batch_flush
        self._lock = threading.Lock()
        self._events: list[IntrusionEvent] = []
        self._audits: list[CommandAudit] = []
        self._seen: set[tuple[str, int]] = set()
        self._audit_seen: set[tuple[str, int]] = set()
        self._next_event_id = 1
        self._fh = None
        self.recovery = RecoveryReport()
        if self._path is not None:
            self._recover()
            try:
                self._fh = open(self._path, "ab")
            except OSError as exc:
                raise StoreError(f"cannot open {self._path}: {exc}") from exc

    @classmethod
    def open(cls, path: str | Path, batch_flush: bool = False) -> EventStore:
        """Open (recovering if the file exists) a log backed by ``path``."""
        return cls(path, batch_flush=batch_flush)

    @classmethod
    def in_memory(cls) -> EventStore:
        """Volatile store with identical semantics, for simulation runs."""
        return cls(None)

    def _recover(self) -> None:
        if not self._path.exists():
            return
        try:
            raw = self._path.read_bytes()
        except OSError as exc:
            raise StoreError(f"cannot read {self._path}: {exc}") from exc

        good_bytes = 0
        lines = raw.split(b"\n")
        # Everything before the final segment is LF-terminated; the final
        # segment is either empty (clean tail) or a torn record.
        tail = lines[-1]
        complete = lines[:-1]
        for i, line in enumerate(complete):
            if not self._replay_line(line):
                if i == len(complete) - 1 and not tail:
                    # Complete but unparsable final line: treat as torn.
                    tail = line
                    break
                raise StoreError(f"{self._path}: corrupt record on line {i + 1}")
            good_bytes += len(line) + 1

        if tail:
            self.recovery.torn_records += 1
            logger.warning("%s: discarding torn trailing record (%d bytes)", self._path, len(tail))
            with open(self._path, "r+b") as fh:
                fh.truncate(good_bytes)

        self.recovery.recovered_events = len(self._events)
        self.recovery.recovered_audits = len(self._audits)

    def _replay_line(self, line: bytes) -> bool:
        try:
            obj = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return False
        if not isinstance(obj, dict):
            return False
        try:
            if obj.get("type") == "event":
                event = IntrusionEvent.from_line_obj(obj)
                self._events.append(event)
                self._seen.add((event.device_id, event.device_seq))
                self._next_event_id = max(self._next_event_id, event.event_id + 1)
                return True
            if obj.get("type") == "command_audit":
                audit = CommandAudit.from_line_obj(obj)
                self._audits.append(audit)
                self._audit_seen.add((audit.operator_id, audit.cmd_id))
                return True
        except (KeyError, TypeError):
            return False
        return False

    def append_event(self, device_id: str, device_seq: int, device_ts_ms: int,
                     server_ts_ms: int, text: str) -> int | None:
        """Assign the next event id and durably append; None on duplicate.

        Duplicates are detected by (device_id, device_seq), which makes
        at-least-once device retries idempotent.
        """
        with self._lock:
            if (device_id, device_seq) in self._seen:
                return None
            event = IntrusionEvent(
                event_id=self._next_event_id,
                device_id=device_id,
                device_seq=device_seq,
                device_ts_ms=device_ts_ms,
                server_ts_ms=server_ts_ms,
                text=text,
            )
            self._write_line(event.to_line_obj())
            self._events.append(event)
            self._seen.add((device_id, device_seq))
            self._next_event_id += 1
            return event.event_id

    def append_audit(self, audit: CommandAudit) -> bool:
        """Append a command audit record; False if (operator, cmd_id) repeats."""
        with self._lock:
            key = (audit.operator_id, audit.cmd_id)
            if key in self._audit_seen:
                return False
            self._write_line(audit.to_line_obj())
            self._audits.append(audit)
            self._audit_seen.add(key)
            return True

    def _write_line(self, obj: dict) -> None:
        if self._fh is None:
            return
        try:
            self._fh.write(json_line(obj))
            self._fh.flush()
            if not self._batch_flush:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            raise StoreError(f"append to {self._path} failed: {exc}") from exc

    def query(self, device_id: str | None = None, from_ms: int = 0,
              to_ms: int = MAX_TS, limit: int = 1000) -> list[IntrusionEvent]:
        """Events with from_ms <= server_ts_ms <= to_ms, event_id order, truncated."""
        if from_ms > to_ms:
            raise ValueError("from_ms must be <= to_ms")
        if limit < 1:
            raise ValueError("limit must be >= 1")
        with self._lock:
            snapshot = list(self._events)
        out = []
        for event in snapshot:
            if device_id is not None and event.device_id != device_id:
                continue
            if not from_ms <= event.server_ts_ms <= to_ms:
                continue
            out.append(event)
            if len(out) == limit:
                break
        return out

    def audits(self) -> list[CommandAudit]:
        with self._lock:
            return list(self._audits)

    def event_count(self) -> int:
        with self._lock:
            return len(self._events)

    @property
    def next_event_id(self) -> int:
        with self._lock:
            return self._next_event_id

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            try:
                self.flush()
            finally:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> EventStore:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
