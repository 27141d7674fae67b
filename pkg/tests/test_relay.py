import pytest

from borderwatch.protocol import (
    Command, CommandAck, Error, Event, Heartbeat, HistoryRequest,
    HistoryResponse, HwWrite, Login, LoginAck, Notify, NotifyAck, Subscribe,
)
from borderwatch.relay import DeviceInfo, RelayCore, render_template
from borderwatch.store import EventStore

DEVICE_TOKEN = "374524ebf2ca430bacfd47e29e4156d"
OP_TOKEN = "operator-secret-1"
OP2_TOKEN = "operator-secret-2"


class FakeChannel:
    def __init__(self):
        self.sent = []
        self.closed = False

    def send(self, msg):
        self.sent.append(msg)

    def close(self):
        self.closed = True

    def last(self):
        return self.sent[-1]


@pytest.fixture
def core():
    clock = {"now": 1000}
    core = RelayCore(
        devices={DEVICE_TOKEN: DeviceInfo("gate-4", "South gate 4")},
        operator_tokens={OP_TOKEN: "op-1", OP2_TOKEN: "op-2"},
        store=EventStore.in_memory(),
        clock=lambda: clock["now"],
    )
    core.test_clock = clock
    return core


def login_device(core, token=DEVICE_TOKEN):
    chan = FakeChannel()
    conn = core.connect(chan)
    core.handle_frame(conn, Login(role="device", auth=token))
    return conn, chan


def login_operator(core, token=OP_TOKEN, patterns=("*",)):
    chan = FakeChannel()
    conn = core.connect(chan)
    core.handle_frame(conn, Login(role="operator", auth=token))
    core.handle_frame(conn, Subscribe(devices=tuple(patterns)))
    return conn, chan


def test_device_login_ok(core):
    conn, chan = login_device(core)
    assert chan.last() == LoginAck(ok=True, id="gate-4")
    assert core.device_online("gate-4")


def test_unknown_token_rejected_and_closed(core):
    conn, chan = login_device(core, token="nope")
    assert chan.last() == LoginAck(ok=False, error="bad_auth")
    assert chan.closed


def test_wrong_proto_rejected(core):
    chan = FakeChannel()
    conn = core.connect(chan)
    core.handle_frame(conn, Login(role="device", auth=DEVICE_TOKEN, proto=2))
    assert chan.last() == LoginAck(ok=False, error="bad_proto")
    assert chan.closed


def test_second_login_is_protocol_error(core):
    conn, chan = login_device(core)
    core.handle_frame(conn, Login(role="device", auth=DEVICE_TOKEN))
    assert isinstance(chan.last(), Error)
    assert chan.last().code == "protocol"
    assert chan.closed


def test_relogin_evicts_older_session(core):
    conn1, chan1 = login_device(core)
    conn2, chan2 = login_device(core)
    assert chan1.closed
    assert not chan2.closed

    # Subsequent commands reach only the new session.
    op_conn, op_chan = login_operator(core)
    core.handle_frame(op_conn, Command(device_id="gate-4", pin="V1", value=1, cmd_id=1))
    assert not any(isinstance(m, HwWrite) for m in chan1.sent)
    assert any(isinstance(m, HwWrite) for m in chan2.sent)


def test_unauthenticated_frames_never_forwarded(core):
    chan = FakeChannel()
    conn = core.connect(chan)
    core.handle_frame(conn, Notify(seq=1, ts_ms=0, text="x"))
    assert isinstance(chan.last(), Error)
    assert chan.closed
    assert core.store.event_count() == 0


def test_notify_stores_fans_out_and_acks(core):
    _, op1 = login_operator(core, OP_TOKEN)
    _, op2 = login_operator(core, OP2_TOKEN)
    conn, chan = login_device(core)

    core.handle_frame(conn, Notify(seq=1, ts_ms=900, text="==> Motion detected"))

    assert core.store.event_count() == 1
    assert chan.last() == NotifyAck(seq=1)
    for op in (op1, op2):
        events = [m for m in op.sent if isinstance(m, Event)]
        assert len(events) == 1
        assert events[0] == Event(event_id=1, device_id="gate-4", ts_ms=1000,
                                  device_ts_ms=900, text="==> Motion detected")


def test_duplicate_notify_acked_not_stored(core):
    _, op1 = login_operator(core)
    conn, chan = login_device(core)
    core.handle_frame(conn, Notify(seq=1, ts_ms=900, text="x"))
    core.handle_frame(conn, Notify(seq=1, ts_ms=900, text="x"))
    assert core.store.event_count() == 1
    assert sum(isinstance(m, NotifyAck) for m in chan.sent) == 2
    assert sum(isinstance(m, Event) for m in op1.sent) == 1


def test_template_renders_device_and_text(core):
    core.set_template("Intruder at {device}: {text}")
    _, op1 = login_operator(core)
    conn, _ = login_device(core)
    core.handle_frame(conn, Notify(seq=1, ts_ms=0, text="==> Motion detected"))
    event = [m for m in op1.sent if isinstance(m, Event)][0]
    assert event.text == "Intruder at gate-4: ==> Motion detected"


def test_template_unknown_placeholder_stays_literal():
    assert render_template("{x} {device} {text}", "d1", "t") == "{x} d1 t"
    assert render_template("{text}", "d1", "hello") == "hello"


def test_subscription_pattern_filters_fanout(core):
    _, matching = login_operator(core, OP_TOKEN, patterns=("gate-*",))
    _, other = login_operator(core, OP2_TOKEN, patterns=("tower-*",))
    conn, _ = login_device(core)
    core.handle_frame(conn, Notify(seq=1, ts_ms=0, text="x"))
    assert sum(isinstance(m, Event) for m in matching.sent) == 1
    assert sum(isinstance(m, Event) for m in other.sent) == 0


def test_unsubscribed_operator_gets_nothing(core):
    chan = FakeChannel()
    conn = core.connect(chan)
    core.handle_frame(conn, Login(role="operator", auth=OP_TOKEN))
    dev_conn, _ = login_device(core)
    core.handle_frame(dev_conn, Notify(seq=1, ts_ms=0, text="x"))
    assert sum(isinstance(m, Event) for m in chan.sent) == 0


def test_command_to_online_device(core):
    op_conn, op_chan = login_operator(core)
    _, dev_chan = login_device(core)
    core.handle_frame(op_conn, Command(device_id="gate-4", pin="V1", value=1, cmd_id=9))
    assert HwWrite(pin="V1", value=1, cmd_id=9) in dev_chan.sent
    assert op_chan.last() == CommandAck(cmd_id=9, delivered=True)
    audit = core.store.audits()[0]
    assert (audit.cmd_id, audit.operator_id, audit.delivered) == (9, "op-1", True)


def test_command_to_offline_device(core):
    op_conn, op_chan = login_operator(core)
    core.handle_frame(op_conn, Command(device_id="gate-4", pin="V1", value=1, cmd_id=2))
    assert op_chan.last() == CommandAck(cmd_id=2, delivered=False)
    assert core.store.audits()[0].delivered is False


def test_command_to_unknown_device(core):
    op_conn, op_chan = login_operator(core)
    core.handle_frame(op_conn, Command(device_id="gate-99", pin="V1", value=1, cmd_id=3))
    assert op_chan.last() == Error(code="no_such_device", detail="gate-99")
    assert core.store.audits() == []


def test_history_round_trip(core):
    conn, _ = login_device(core)
    for i in range(5):
        core.test_clock["now"] = (i + 1) * 10
        core.handle_frame(conn, Notify(seq=i + 1, ts_ms=0, text=f"e{i}"))
    op_conn, op_chan = login_operator(core)
    core.handle_frame(op_conn, HistoryRequest(from_ms=20, to_ms=40, limit=10))
    resp = op_chan.last()
    assert isinstance(resp, HistoryResponse)
    assert [e.event_id for e in resp.events] == [2, 3, 4]


def test_history_bad_range(core):
    op_conn, op_chan = login_operator(core)
    core.handle_frame(op_conn, HistoryRequest(from_ms=50, to_ms=10, limit=10))
    assert isinstance(op_chan.last(), Error)
    assert op_chan.last().code == "bad_request"


def test_role_mismatch_frames_rejected(core):
    dev_conn, dev_chan = login_device(core)
    core.handle_frame(dev_conn, Command(device_id="gate-4", pin="V1", value=1, cmd_id=1))
    assert isinstance(dev_chan.last(), Error)
    assert dev_chan.last().code == "not_allowed"
    assert not dev_chan.closed  # benign, session survives

    op_conn, op_chan = login_operator(core)
    core.handle_frame(op_conn, Notify(seq=1, ts_ms=0, text="x"))
    assert isinstance(op_chan.last(), Error)
    assert core.store.event_count() == 0


def test_heartbeat_is_accepted_quietly(core):
    conn, chan = login_device(core)
    before = len(chan.sent)
    core.handle_frame(conn, Heartbeat(ts_ms=5))
    assert len(chan.sent) == before


def test_fanout_order_matches_event_id_order(core):
    _, op1 = login_operator(core)
    conn, _ = login_device(core)
    for seq in range(1, 20):
        core.handle_frame(conn, Notify(seq=seq, ts_ms=0, text="x"))
    ids = [m.event_id for m in op1.sent if isinstance(m, Event)]
    assert ids == list(range(1, 20))


def test_disconnect_removes_session(core):
    conn, chan = login_device(core)
    core.disconnect(conn)
    assert not core.device_online("gate-4")
    op_conn, op_chan = login_operator(core)
    core.handle_frame(op_conn, Command(device_id="gate-4", pin="V1", value=1, cmd_id=1))
    assert op_chan.last() == CommandAck(cmd_id=1, delivered=False)
