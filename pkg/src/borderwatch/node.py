"""Simulated firmware of one sensor node.

One node owns a connection state machine (boot, link, cloud login,
online, backoff), a periodic sensing loop with edge-triggered
notifications, and the actuator pin handling for the commanded alarm.
Unlike the reference firmware, which re-notifies on every loop
iteration while the beam is blocked, a notification fires once per
clear-to-detect transition, gated by a cooldown, and the node re-arms
only after the path has stayed clear for a hold period.

Notifications queue while offline (bounded, drop-oldest) and flush in
sequence order on reconnect; unacknowledged ones retransmit on a timer,
relying on server-side deduplication for at-least-once delivery.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from . import protocol
from .protocol import HwWrite, Login, LoginAck, Message, Notify, NotifyAck
from .sensor import AnalogReading, IrSensorConfig, is_detection

DEFAULT_NOTIFY_TEXT = "==> Motion detected"


@dataclass(frozen=True)
class NodeConfig:
    auth_token: str
    alarm_pin: str = "D7"
    sensor_pin: str = "A0"
    sample_period_ms: int = 100
    notify_cooldown_ms: int = 5000
    rearm_hold_ms: int = 1000
    backoff_base_ms: int = 500
    backoff_cap_ms: int = 8000
    offline_queue_cap: int = 1024
    # At-least-once retransmit of unacked notifications.
    notify_retry_ms: int = 500
    notify_retry_limit: int = 10
    # A login left unanswered (lost frame, dead server) re-enters backoff.
    login_timeout_ms: int = 2000
    notify_text: str = DEFAULT_NOTIFY_TEXT

    def __post_init__(self) -> None:
        if self.sample_period_ms <= 0:
            raise ValueError("sample_period_ms must be > 0")
        if self.backoff_base_ms > self.backoff_cap_ms:
            raise ValueError("backoff_base_ms must be <= backoff_cap_ms")
        if self.offline_queue_cap <= 0:
            raise ValueError("offline_queue_cap must be > 0")


class Phase(enum.Enum):
    BOOT = "boot"
    LINK_CONNECTING = "link_connecting"
    CLOUD_LOGIN = "cloud_login"
    ONLINE = "online"
    BACKOFF = "backoff"
    AUTH_FAILED = "auth_failed"


class CommandResult(enum.Enum):
    APPLIED = "applied"
    IGNORED = "ignored"    # well-formed pin the node does not drive
    REJECTED = "rejected"  # malformed pin name


@dataclass
class _Pending:
    msg: Notify
    attempts: int = 0
    last_sent_ms: int = 0


@dataclass
class DeviceNode:
    """State machine for one node; drive it with a clock, readings, and frames."""

    cfg: NodeConfig
    sensor_cfg: IrSensorConfig = field(default_factory=IrSensorConfig)

    phase: Phase = Phase.BOOT
    alarm_on: bool = False
    led_on: bool = False          # follows detection, independent of the alarm
    armed: bool = True
    next_seq: int = 1
    drop_count: int = 0           # notifications discarded by the bounded queue
    retry_exhausted: int = 0
    last_cmd_id: int | None = None

    _pending: deque[_Pending] = field(default_factory=deque)
    _clear_since_ms: int | None = None
    _last_notify_ms: int | None = None
    _backoff_delay_ms: int = 0
    _backoff_deadline_ms: int = 0
    _login_sent_ms: int = 0

    @property
    def pending_count(self) -> int:
        return len(self._pending)

    # -- connection state machine ------------------------------------

    def advance_connection(self, now: int, link_up: bool,
                           login_ack: LoginAck | None = None) -> list[Message]:
        """Step the connection machine; returns frames to transmit.

        Transitions cascade within one call (a booting node with the
        link already up goes straight to sending its login).
        """
        out: list[Message] = []
        if self.phase is Phase.AUTH_FAILED:
            return out

        if login_ack is not None and self.phase is Phase.CLOUD_LOGIN:
            if login_ack.ok:
                self.phase = Phase.ONLINE
                self._backoff_delay_ms = 0
                out.extend(self._flush_pending(now))
            else:
                # Bad credentials never fix themselves; retrying would
                # just hammer the server.
                self.phase = Phase.AUTH_FAILED
                return out

        # Losing an established (or half-established) session backs off;
        # LINK_CONNECTING just keeps waiting for the link to appear.
        if not link_up and self.phase in (Phase.CLOUD_LOGIN, Phase.ONLINE):
            self._enter_backoff(now)

        if (self.phase is Phase.CLOUD_LOGIN
                and now - self._login_sent_ms >= self.cfg.login_timeout_ms):
            self._enter_backoff(now)

        if self.phase is Phase.BOOT:
            self.phase = Phase.LINK_CONNECTING

        if self.phase is Phase.BACKOFF and now >= self._backoff_deadline_ms:
            self.phase = Phase.LINK_CONNECTING

        if self.phase is Phase.LINK_CONNECTING and link_up:
            self.phase = Phase.CLOUD_LOGIN
            self._login_sent_ms = now
            out.append(Login(role="device", auth=self.cfg.auth_token,
                             proto=protocol.PROTO_VERSION))
        return out

    def _enter_backoff(self, now: int) -> None:
        if self._backoff_delay_ms == 0:
            self._backoff_delay_ms = self.cfg.backoff_base_ms
        else:
            self._backoff_delay_ms = min(self._backoff_delay_ms * 2, self.cfg.backoff_cap_ms)
        self._backoff_deadline_ms = now + self._backoff_delay_ms
        self.phase = Phase.BACKOFF

    def _flush_pending(self, now: int) -> list[Message]:
        out = []
        for entry in self._pending:  # deque keeps seq order
            entry.attempts += 1
            entry.last_sent_ms = now
            out.append(entry.msg)
        return out

    # -- sensing loop --------------------------------------------------

    def tick(self, now: int, reading: AnalogReading) -> list[Message]:
        """One sampling period: detection edge logic plus queue service.

        Callable in any phase; detections keep queueing while offline so
        nothing is lost across an outage (up to the queue bound).
        """
        detecting = is_detection(reading, self.sensor_cfg)
        self.led_on = detecting

        # Re-arm check runs on elapsed clear time before this reading is
        # applied, so a detection arriving exactly at the hold boundary
        # fires again.
        if (not self.armed and self._clear_since_ms is not None
                and now - self._clear_since_ms >= self.cfg.rearm_hold_ms):
            self.armed = True

        if detecting:
            self._clear_since_ms = None
            cooled = (self._last_notify_ms is None
                      or now - self._last_notify_ms >= self.cfg.notify_cooldown_ms)
            if self.armed and cooled:
                self._queue_notify(now)
        else:
            if self._clear_since_ms is None:
                self._clear_since_ms = now

        return self._service_queue(now)

    def _queue_notify(self, now: int) -> None:
        msg = Notify(seq=self.next_seq, ts_ms=now, text=self.cfg.notify_text)
        self.next_seq += 1
        self.armed = False
        self._last_notify_ms = now
        self._pending.append(_Pending(msg))
        while len(self._pending) > self.cfg.offline_queue_cap:
            self._pending.popleft()
            self.drop_count += 1

    def _service_queue(self, now: int) -> list[Message]:
        if self.phase is not Phase.ONLINE:
            return []
        out: list[Message] = []
        exhausted: list[_Pending] = []
        for entry in self._pending:
            if entry.attempts == 0:
                pass  # first transmission
            elif entry.attempts >= self.cfg.notify_retry_limit:
                exhausted.append(entry)
                continue
            elif now - entry.last_sent_ms < self.cfg.notify_retry_ms:
                continue
            entry.attempts += 1
            entry.last_sent_ms = now
            out.append(entry.msg)
        for entry in exhausted:
            self._pending.remove(entry)
            self.retry_exhausted += 1
        return out

    # -- inbound frames ------------------------------------------------

    def ack_notify(self, seq: int) -> None:
        for entry in list(self._pending):
            if entry.msg.seq == seq:
                self._pending.remove(entry)
                return

    def apply_command(self, cmd: HwWrite) -> CommandResult:
        """Actuator write: the virtual alarm pin V1 or the physical alarm pin."""
        if not _valid_pin(cmd.pin):
            return CommandResult.REJECTED
        self.last_cmd_id = cmd.cmd_id
        if cmd.pin in ("V1", self.cfg.alarm_pin):
            self.alarm_on = cmd.value != 0
            return CommandResult.APPLIED
        return CommandResult.IGNORED

    def handle_frame(self, now: int, msg: Message) -> list[Message]:
        """Dispatch one server frame; returns frames to transmit."""
        if isinstance(msg, LoginAck):
            return self.advance_connection(now, link_up=True, login_ack=msg)
        if isinstance(msg, NotifyAck):
            self.ack_notify(msg.seq)
            return []
        if isinstance(msg, HwWrite):
            self.apply_command(msg)
            return []
        return []


def _valid_pin(pin: str) -> bool:
    return len(pin) >= 2 and pin[0].isalpha() and pin[1:].isdigit()
