import random

import pytest

from borderwatch import protocol
from borderwatch.protocol import (
    Command, CommandAck, DecodeError, Error, Event, Heartbeat, HistoryRequest,
    HistoryResponse, HwWrite, Login, LoginAck, Notify, NotifyAck, Subscribe,
    decode, encode, split_frames,
)

# Device auth fixture mirroring the reference firmware's token.
FIXTURE_TOKEN = "374524ebf2ca430bacfd47e29e4156d"

SAMPLES = [
    Login(role="device", auth=FIXTURE_TOKEN, proto=1),
    Login(role="operator", auth="op-secret", proto=1),
    LoginAck(ok=True, id="gate-1"),
    LoginAck(ok=False, error="bad_auth"),
    Notify(seq=1, ts_ms=123456, text="==> Motion detected"),
    NotifyAck(seq=7),
    Heartbeat(ts_ms=0),
    Command(device_id="gate-1", pin="V1", value=1, cmd_id=4),
    HwWrite(pin="V1", value=0, cmd_id=4),
    CommandAck(cmd_id=4, delivered=True),
    Subscribe(devices=("gate-*", "tower-9")),
    Event(event_id=12, device_id="gate-1", ts_ms=999, device_ts_ms=321, text="t"),
    HistoryRequest(from_ms=0, to_ms=10_000, limit=50),
    HistoryRequest(from_ms=0, to_ms=1, limit=1, device_id="gate-1"),
    HistoryResponse(events=(
        Event(event_id=1, device_id="a", ts_ms=10, device_ts_ms=5, text="x"),
        Event(event_id=2, device_id="b", ts_ms=20, device_ts_ms=15, text="y"),
    )),
    Error(code="no_such_device", detail="gate-99"),
]


def test_heartbeat_byte_exact():
    assert encode(Heartbeat(ts_ms=0)) == b'{"type":"heartbeat","ts_ms":0}\n'


def test_notify_ack_byte_exact():
    assert encode(NotifyAck(seq=7)) == b'{"type":"notify_ack","seq":7}\n'


def test_device_login_byte_exact():
    expected = (
        b'{"type":"login","role":"device",'
        b'"auth":"374524ebf2ca430bacfd47e29e4156d","proto":1}\n'
    )
    assert encode(Login(role="device", auth=FIXTURE_TOKEN, proto=1)) == expected


@pytest.mark.parametrize("msg", SAMPLES, ids=lambda m: m.TYPE)
def test_round_trip_identity(msg):
    assert decode(encode(msg)) == msg


def test_frames_are_single_lines():
    for msg in SAMPLES:
        data = encode(msg)
        assert data.endswith(b"\n")
        assert data.count(b"\n") == 1


def test_newline_in_text_stays_escaped():
    msg = Notify(seq=1, ts_ms=0, text="line1\nline2")
    data = encode(msg)
    assert data.count(b"\n") == 1
    assert decode(data) == msg


def test_unknown_type_rejected():
    with pytest.raises(DecodeError) as exc:
        decode(b'{"type":"bogus"}')
    assert exc.value.kind == "unknown_type"


def test_missing_field_named():
    with pytest.raises(DecodeError) as exc:
        decode(b'{"type":"notify","seq":1}')
    assert exc.value.kind == "missing_field"
    assert exc.value.field in ("ts_ms", "text")


def test_missing_type_field():
    with pytest.raises(DecodeError) as exc:
        decode(b'{"seq":1}')
    assert exc.value.kind == "missing_field"
    assert exc.value.field == "type"


def test_syntax_error_kind():
    with pytest.raises(DecodeError) as exc:
        decode(b"{nope")
    assert exc.value.kind == "syntax"


def test_non_object_frame_rejected():
    with pytest.raises(DecodeError):
        decode(b"[1,2,3]")


def test_wrong_typed_field_rejected():
    with pytest.raises(DecodeError) as exc:
        decode(b'{"type":"notify","seq":"one","ts_ms":0,"text":"t"}')
    assert exc.value.kind == "bad_field"
    # JSON true must not pass for an integer field
    with pytest.raises(DecodeError):
        decode(b'{"type":"notify_ack","seq":true}')


def test_bad_role_rejected():
    with pytest.raises(DecodeError):
        decode(b'{"type":"login","role":"admin","auth":"x","proto":1}')


def test_unknown_extra_fields_ignored():
    msg = decode(b'{"type":"notify_ack","seq":3,"debug":"yes","v":[1]}')
    assert msg == NotifyAck(seq=3)


def test_framing_concatenation():
    stream = b"".join(encode(m) for m in SAMPLES)
    frames = split_frames(stream)
    assert len(frames) == len(SAMPLES)
    assert [decode(f) for f in frames] == SAMPLES


def random_message(rng: random.Random):
    def text():
        alphabet = "abc XYZ09{}\"\\\n\tωβ→"
        return "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 24)))

    def ident():
        return "".join(rng.choice("abcdefgh-123") for _ in range(rng.randrange(1, 12)))

    choice = rng.randrange(13)
    if choice == 0:
        return Login(role=rng.choice(["device", "operator"]), auth=ident(), proto=1)
    if choice == 1:
        ok = rng.random() < 0.5
        return LoginAck(ok=ok, id=ident() if ok else "",
                        error=None if ok else "bad_auth")
    if choice == 2:
        return Notify(seq=rng.randrange(10**9), ts_ms=rng.randrange(10**12), text=text())
    if choice == 3:
        return NotifyAck(seq=rng.randrange(10**9))
    if choice == 4:
        return Heartbeat(ts_ms=rng.randrange(10**12))
    if choice == 5:
        return Command(device_id=ident(), pin=f"V{rng.randrange(10)}",
                       value=rng.randrange(-5, 1024), cmd_id=rng.randrange(10**6))
    if choice == 6:
        return HwWrite(pin=f"D{rng.randrange(10)}", value=rng.randrange(2),
                       cmd_id=rng.randrange(10**6))
    if choice == 7:
        return CommandAck(cmd_id=rng.randrange(10**6), delivered=rng.random() < 0.5)
    if choice == 8:
        return Subscribe(devices=tuple(ident() for _ in range(rng.randrange(0, 4))))
    if choice == 9:
        return Event(event_id=rng.randrange(1, 10**9), device_id=ident(),
                     ts_ms=rng.randrange(10**12), device_ts_ms=rng.randrange(10**12),
                     text=text())
    if choice == 10:
        return HistoryRequest(from_ms=0, to_ms=rng.randrange(10**12),
                              limit=rng.randrange(1, 1000),
                              device_id=ident() if rng.random() < 0.5 else None)
    if choice == 11:
        return HistoryResponse(events=tuple(
            Event(event_id=i + 1, device_id=ident(), ts_ms=i, device_ts_ms=i, text=text())
            for i in range(rng.randrange(0, 4))
        ))
    return Error(code=ident(), detail=text())


def test_random_round_trips():
    rng = random.Random(2024)
    for _ in range(500):
        msg = random_message(rng)
        assert decode(encode(msg)) == msg


def test_fuzz_lines_never_crash():
    rng = random.Random(99)
    for _ in range(500):
        line = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 200)))
        try:
            decode(line)
        except DecodeError:
            pass  # the only acceptable failure mode
