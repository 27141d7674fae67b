"""Deterministic discrete-time harness for the full pipeline.

Wires simulated nodes to an in-process relay core over in-memory
channels, drives intruder presence intervals, network faults, and
operator actions from a script, and reports counts, latencies, and drop
counters. Time is purely logical (tick numbers); the same script and
seed always produce a byte-identical report.

Per tick, in order: fault state update and link severing, delivery of
last tick's server-to-node frames, connection stepping, sensor sampling
and the node loop, uplink delivery through the fault filter (server
replies land next tick), then operator actions due at this tick.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .node import DeviceNode, NodeConfig
from .protocol import Command, CommandAck, Event, Login, Message, Subscribe
from .relay import DeviceInfo, RelayCore
from .sensor import IrSensorConfig, sample
from .store import EventStore

FAULT_KINDS = ("drop_link", "drop_uplink_pct")


class ScenarioError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid scenario script: " + "; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    auth: str
    node_cfg: NodeConfig
    sensor_cfg: IrSensorConfig = field(default_factory=IrSensorConfig)
    placement: str = ""


@dataclass(frozen=True)
class OperatorSpec:
    operator_id: str
    subscribe: tuple[str, ...] = ("*",)


@dataclass(frozen=True)
class IntruderInterval:
    node_id: str
    enter_ms: int
    exit_ms: int  # presence is the half-open interval [enter_ms, exit_ms)
    distance_cm: float


@dataclass(frozen=True)
class FaultSpec:
    node_id: str
    kind: str
    from_ms: int
    to_ms: int  # active over [from_ms, to_ms)
    pct: float = 0.0


@dataclass(frozen=True)
class OperatorAction:
    at_ms: int
    operator_id: str
    device_id: str
    pin: str
    value: int


@dataclass(frozen=True)
class ScenarioScript:
    duration_ms: int
    tick_ms: int = 100
    nodes: tuple[NodeSpec, ...] = ()
    operators: tuple[OperatorSpec, ...] = ()
    intruders: tuple[IntruderInterval, ...] = ()
    faults: tuple[FaultSpec, ...] = ()
    operator_actions: tuple[OperatorAction, ...] = ()

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ScenarioScript:
        nodes = []
        for entry in raw.get("nodes", []):
            node_cfg = NodeConfig(auth_token=entry.get("auth", f"token-{entry['id']}"),
                                  **entry.get("node", {}))
            sensor_cfg = IrSensorConfig(**entry.get("sensor", {}))
            nodes.append(NodeSpec(node_id=entry["id"], auth=node_cfg.auth_token,
                                  node_cfg=node_cfg, sensor_cfg=sensor_cfg,
                                  placement=entry.get("placement", "")))
        operators = [
            OperatorSpec(operator_id=entry["id"],
                         subscribe=tuple(entry.get("subscribe", ["*"])))
            for entry in raw.get("operators", [])
        ]
        intruders = [
            IntruderInterval(node_id=e["node_id"], enter_ms=e["enter_ms"],
                             exit_ms=e["exit_ms"], distance_cm=e["distance_cm"])
            for e in raw.get("intruders", [])
        ]
        faults = [
            FaultSpec(node_id=e["node_id"], kind=e["kind"], from_ms=e["from_ms"],
                      to_ms=e["to_ms"], pct=e.get("pct", 0.0))
            for e in raw.get("faults", [])
        ]
        actions = [
            OperatorAction(at_ms=e["at_ms"], operator_id=e["operator_id"],
                           device_id=e["command"]["device_id"],
                           pin=e["command"]["pin"], value=e["command"]["value"])
            for e in raw.get("operator_actions", [])
        ]
        return cls(duration_ms=raw["duration_ms"], tick_ms=raw.get("tick_ms", 100),
                   nodes=tuple(nodes), operators=tuple(operators),
                   intruders=tuple(intruders), faults=tuple(faults),
                   operator_actions=tuple(actions))

    @classmethod
    def from_file(cls, path: str | Path) -> ScenarioScript:
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def validate(script: ScenarioScript) -> list[str]:
    """All the ways the script is invalid; empty when it is runnable."""
    bad = []
    if script.tick_ms <= 0:
        bad.append("tick_ms must be > 0")
    if script.duration_ms < 0:
        bad.append("duration_ms must be >= 0")
    node_ids = [n.node_id for n in script.nodes]
    if len(set(node_ids)) != len(node_ids):
        bad.append("duplicate node ids")
    op_ids = [o.operator_id for o in script.operators]
    if len(set(op_ids)) != len(op_ids):
        bad.append("duplicate operator ids")
    known_nodes = set(node_ids)
    known_ops = set(op_ids)
    for i, iv in enumerate(script.intruders):
        if iv.node_id not in known_nodes:
            bad.append(f"intruders[{i}]: unknown node {iv.node_id!r}")
        if iv.exit_ms < iv.enter_ms:
            bad.append(f"intruders[{i}]: exit_ms < enter_ms")
        if iv.enter_ms < 0 or iv.exit_ms > script.duration_ms:
            bad.append(f"intruders[{i}]: interval outside scenario duration")
        if iv.distance_cm <= 0:
            bad.append(f"intruders[{i}]: distance_cm must be > 0")
    for i, f in enumerate(script.faults):
        if f.node_id not in known_nodes:
            bad.append(f"faults[{i}]: unknown node {f.node_id!r}")
        if f.kind not in FAULT_KINDS:
            bad.append(f"faults[{i}]: unknown kind {f.kind!r}")
        if f.to_ms < f.from_ms:
            bad.append(f"faults[{i}]: to_ms < from_ms")
        if f.from_ms < 0 or f.to_ms > script.duration_ms:
            bad.append(f"faults[{i}]: interval outside scenario duration")
        if not 0 <= f.pct <= 100:
            bad.append(f"faults[{i}]: pct must be within [0, 100]")
    for i, a in enumerate(script.operator_actions):
        if a.operator_id not in known_ops:
            bad.append(f"operator_actions[{i}]: unknown operator {a.operator_id!r}")
        if not 0 <= a.at_ms < max(script.duration_ms, 1):
            bad.append(f"operator_actions[{i}]: at_ms outside scenario duration")
    return bad


@dataclass
class SimulationReport:
    seed: int
    duration_ms: int
    tick_ms: int
    ticks: int
    stored_events: int
    nodes: dict[str, dict[str, Any]]
    operators: dict[str, dict[str, Any]]
    notification_latency_ticks: list[int]
    command_roundtrip_ticks: list[int]
    uplink_frames_dropped: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "tick_ms": self.tick_ms,
            "ticks": self.ticks,
            "stored_events": self.stored_events,
            "nodes": self.nodes,
            "operators": self.operators,
            "notification_latency_ticks": self.notification_latency_ticks,
            "command_roundtrip_ticks": self.command_roundtrip_ticks,
            "uplink_frames_dropped": self.uplink_frames_dropped,
        }

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n").encode("utf-8")


class _OperatorChannel:
    """Loss-free collector standing in for a live operator console."""

    def __init__(self, sim: "_Sim"):
        self._sim = sim
        self.conn: Any = None
        self.delivered: list[tuple[int, int]] = []  # (event_id, tick)
        self.acks: list[tuple[int, int]] = []       # (cmd_id, tick)
        self.frames: list[Message] = []

    def send(self, msg: Message) -> None:
        self.frames.append(msg)
        if isinstance(msg, Event):
            self.delivered.append((msg.event_id, self._sim.tick))
        elif isinstance(msg, CommandAck):
            self.acks.append((msg.cmd_id, self._sim.tick))

    def close(self) -> None:
        pass


class _NodeChannel:
    """Server-to-device leg; frames land in an inbox read next tick."""

    def __init__(self):
        self.inbox: list[Message] = []
        self.closed = False

    def send(self, msg: Message) -> None:
        if not self.closed:
            self.inbox.append(msg)

    def close(self) -> None:
        self.closed = True


@dataclass
class _NodeRuntime:
    spec: NodeSpec
    node: DeviceNode
    sensor_rng: random.Random
    fault_rng: random.Random
    channel: _NodeChannel | None = None
    conn: Any = None
    link_was_up: bool = True
    prev_seq: int = 1
    prev_alarm: bool = False
    detections: int = 0
    uplink_dropped: int = 0
    detection_tick: dict[int, int] = field(default_factory=dict)  # seq -> tick
    alarm_transitions: list[list] = field(default_factory=list)   # [tick, on]


class _Sim:
    def __init__(self, script: ScenarioScript, seed: int):
        self.script = script
        self.seed = seed
        self.tick = 0
        self.now_ms = 0
        self.store = EventStore.in_memory()
        devices = {n.auth: DeviceInfo(n.node_id, n.placement or n.node_id)
                   for n in script.nodes}
        op_tokens = {f"op-token-{o.operator_id}": o.operator_id for o in script.operators}
        self.core = RelayCore(devices, op_tokens, self.store, clock=lambda: self.now_ms)
        self.runtimes = {
            n.node_id: _NodeRuntime(
                spec=n,
                node=DeviceNode(cfg=n.node_cfg, sensor_cfg=n.sensor_cfg),
                sensor_rng=random.Random(f"{seed}/sensor/{n.node_id}"),
                fault_rng=random.Random(f"{seed}/fault/{n.node_id}"),
            )
            for n in script.nodes
        }
        self.op_channels: dict[str, _OperatorChannel] = {}
        self.cmd_latency: list[int] = []
        self._next_cmd_id = 1

    # -- scripted lookups ----------------------------------------------

    def _distance(self, node_id: str, now: int) -> float | None:
        for iv in self.script.intruders:
            if iv.node_id == node_id and iv.enter_ms <= now < iv.exit_ms:
                return iv.distance_cm
        return None

    def _link_up(self, node_id: str, now: int) -> bool:
        return not any(
            f.node_id == node_id and f.kind == "drop_link" and f.from_ms <= now < f.to_ms
            for f in self.script.faults
        )

    def _uplink_drop_pct(self, node_id: str, now: int) -> float:
        pct = 0.0
        for f in self.script.faults:
            if f.node_id == node_id and f.kind == "drop_uplink_pct" and f.from_ms <= now < f.to_ms:
                pct = max(pct, f.pct)
        return pct

    # -- run -------------------------------------------------------------

    def run(self) -> SimulationReport:
        self._login_operators()
        total_ticks = self.script.duration_ms // self.script.tick_ms
        for k in range(total_ticks):
            self.tick = k
            self.now_ms = k * self.script.tick_ms
            for rt in self.runtimes.values():
                self._step_node(rt)
            self._fire_operator_actions()
        return self._report(total_ticks)

    def _login_operators(self) -> None:
        for op in self.script.operators:
            chan = _OperatorChannel(self)
            self.op_channels[op.operator_id] = chan
            chan.conn = self.core.connect(chan)
            self.core.handle_frame(chan.conn, Login(role="operator",
                                                    auth=f"op-token-{op.operator_id}"))
            self.core.handle_frame(chan.conn, Subscribe(devices=op.subscribe))

    def _step_node(self, rt: _NodeRuntime) -> None:
        now = self.now_ms
        link_up = self._link_up(rt.spec.node_id, now)

        # Link drop severs the server-side session, like a dead TCP peer.
        if rt.link_was_up and not link_up and rt.conn is not None:
            self.core.disconnect(rt.conn)
            if rt.channel is not None:
                rt.channel.close()
            rt.conn = None
            rt.channel = None
        rt.link_was_up = link_up

        # A server-side close (eviction, protocol fault) looks like a reset.
        if rt.channel is not None and rt.channel.closed:
            rt.conn = None
            rt.channel = None
            rt.node.advance_connection(now, link_up=False)

        outbound: list[Message] = []

        if rt.channel is not None:
            inbox, rt.channel.inbox = rt.channel.inbox, []
            for frame in inbox:
                outbound.extend(rt.node.handle_frame(now, frame))

        outbound.extend(rt.node.advance_connection(now, link_up))

        reading = sample(rt.spec.sensor_cfg, self._distance(rt.spec.node_id, now),
                         rt.sensor_rng)
        outbound.extend(rt.node.tick(now, reading))

        fresh = rt.node.next_seq - rt.prev_seq
        if fresh:
            for seq in range(rt.prev_seq, rt.node.next_seq):
                rt.detection_tick[seq] = self.tick
            rt.detections += fresh
            rt.prev_seq = rt.node.next_seq

        if rt.node.alarm_on != rt.prev_alarm:
            rt.alarm_transitions.append([self.tick, rt.node.alarm_on])
            rt.prev_alarm = rt.node.alarm_on

        if outbound and link_up:
            drop_pct = self._uplink_drop_pct(rt.spec.node_id, now)
            for frame in outbound:
                if drop_pct and rt.fault_rng.random() * 100 < drop_pct:
                    rt.uplink_dropped += 1
                    continue
                if rt.conn is None:
                    rt.channel = _NodeChannel()
                    rt.conn = self.core.connect(rt.channel)
                self.core.handle_frame(rt.conn, frame)

    def _fire_operator_actions(self) -> None:
        tick_ms = self.script.tick_ms
        for action in self.script.operator_actions:
            # Actions fire on the tick whose window contains at_ms.
            if action.at_ms // tick_ms != self.tick:
                continue
            chan = self.op_channels[action.operator_id]
            cmd = Command(device_id=action.device_id, pin=action.pin,
                          value=action.value, cmd_id=self._next_cmd_id)
            self._next_cmd_id += 1
            issue_tick = self.tick
            before = len(chan.acks)
            self.core.handle_frame(chan.conn, cmd)
            for cmd_id, tick in chan.acks[before:]:
                if cmd_id == cmd.cmd_id:
                    self.cmd_latency.append(tick - issue_tick)

    def _report(self, total_ticks: int) -> SimulationReport:
        # Map stored events back to the tick their notify was created on.
        event_origin = {}
        for event in self.store.query(limit=max(1, self.store.event_count())):
            rt = self.runtimes.get(event.device_id)
            if rt is not None and event.device_seq in rt.detection_tick:
                event_origin[event.event_id] = rt.detection_tick[event.device_seq]
        latencies = []
        for op_id in sorted(self.op_channels):
            for event_id, tick in self.op_channels[op_id].delivered:
                if event_id in event_origin:
                    latencies.append(tick - event_origin[event_id])
        nodes = {}
        for node_id in sorted(self.runtimes):
            rt = self.runtimes[node_id]
            nodes[node_id] = {
                "detections": rt.detections,
                "uplink_dropped": rt.uplink_dropped,
                "buffer_drops": rt.node.drop_count,
                "retry_exhausted": rt.node.retry_exhausted,
                "alarm_transitions": rt.alarm_transitions,
                "final_alarm_on": rt.node.alarm_on,
                "final_phase": rt.node.phase.value,
            }
        operators = {
            op_id: {"delivered": len(self.op_channels[op_id].delivered)}
            for op_id in sorted(self.op_channels)
        }
        return SimulationReport(
            seed=self.seed,
            duration_ms=self.script.duration_ms,
            tick_ms=self.script.tick_ms,
            ticks=total_ticks,
            stored_events=self.store.event_count(),
            nodes=nodes,
            operators=operators,
            notification_latency_ticks=latencies,
            command_roundtrip_ticks=self.cmd_latency,
            uplink_frames_dropped=sum(rt.uplink_dropped for rt in self.runtimes.values()),
        )


def run(script: ScenarioScript, seed: int = 0) -> SimulationReport:
    """Execute the script; fully deterministic for a given (script, seed)."""
    violations = validate(script)
    if violations:
        raise ScenarioError(violations)
    return _Sim(script, seed).run()


def run_detailed(script: ScenarioScript, seed: int = 0):
    """Like run, but also returns the stored intrusion events for export."""
    violations = validate(script)
    if violations:
        raise ScenarioError(violations)
    sim = _Sim(script, seed)
    report = sim.run()
    events = sim.store.query(limit=max(1, sim.store.event_count()))
    return report, events
