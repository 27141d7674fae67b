import json
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from borderwatch.cli import main

DEVICE_TOKEN = "374524ebf2ca430bacfd47e29e4156d"
OP_TOKEN = "op-secret"


def crossing_script() -> dict:
    return {
        "duration_ms": 20_000,
        "tick_ms": 100,
        "nodes": [{"id": "gate-1"}],
        "operators": [{"id": "op-1", "subscribe": ["*"]}],
        "intruders": [
            {"node_id": "gate-1", "enter_ms": 10_000, "exit_ms": 12_000, "distance_cm": 15},
        ],
    }


def write_server_config(tmp_path: Path) -> Path:
    config = {
        "port": 0,
        "host": "127.0.0.1",
        "store": str(tmp_path / "events.log"),
        "template": "{text}",
        "devices": [
            {"auth": DEVICE_TOKEN, "device_id": "gate-1", "display_name": "Gate 1"},
        ],
        "operators": [{"auth": OP_TOKEN, "operator_id": "op-1"}],
    }
    path = tmp_path / "server.json"
    path.write_text(json.dumps(config))
    return path


# -- simulate ---------------------------------------------------------


def test_simulate_writes_report(tmp_path, capsys):
    script = tmp_path / "scenario.json"
    script.write_text(json.dumps(crossing_script()))
    report_path = tmp_path / "report.json"
    code = main(["simulate", "--script", str(script), "--seed", "1",
                 "--report", str(report_path)])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["stored_events"] == 1
    assert report["operators"]["op-1"]["delivered"] == 1


def test_simulate_stdout_and_determinism(tmp_path, capsys):
    script = tmp_path / "scenario.json"
    script.write_text(json.dumps(crossing_script()))
    assert main(["simulate", "--script", str(script), "--seed", "7"]) == 0
    first = capsys.readouterr().out
    assert main(["simulate", "--script", str(script), "--seed", "7"]) == 0
    second = capsys.readouterr().out
    assert first == second
    assert json.loads(first)["stored_events"] == 1


def test_simulate_renders_figures_and_csv(tmp_path):
    script = tmp_path / "scenario.json"
    script.write_text(json.dumps(crossing_script()))
    figures = tmp_path / "out"
    code = main(["simulate", "--script", str(script), "--seed", "1",
                 "--report", str(tmp_path / "r.json"), "--figures", str(figures)])
    assert code == 0
    assert (figures / "counts.png").stat().st_size > 0
    assert (figures / "latency.png").stat().st_size > 0
    rows = (figures / "events.csv").read_text().splitlines()
    assert rows[0].startswith("event_id,device_id,device_seq")
    assert len(rows) == 2  # header + one event


def test_simulate_missing_script_exits_2(tmp_path):
    assert main(["simulate", "--script", str(tmp_path / "nope.json")]) == 2


def test_simulate_invalid_script_exits_2(tmp_path, capsys):
    bad = crossing_script()
    bad["faults"] = [{"node_id": "gate-1", "kind": "drop_uplink_pct",
                      "from_ms": 0, "to_ms": 1000, "pct": 130}]
    script = tmp_path / "scenario.json"
    script.write_text(json.dumps(bad))
    assert main(["simulate", "--script", str(script)]) == 2
    assert "pct" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])  # --script is required
    assert exc.value.code == 2


# -- serve ---------------------------------------------------------------


def test_serve_bad_config_exits_2(tmp_path, capsys):
    assert main(["serve", "--config", str(tmp_path / "missing.json")]) == 2


def start_server_proc(config_path: Path) -> tuple[subprocess.Popen, int]:
    proc = subprocess.Popen(
        [sys.executable, "-m", "borderwatch", "serve", "--config", str(config_path)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    line = proc.stdout.readline()
    assert "listening on" in line, f"unexpected server output: {line!r}"
    port = int(line.split("listening on ")[1].split(",")[0].rsplit(":", 1)[1])
    # Wait for the socket to accept.
    deadline = time.time() + 5
    while time.time() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            break
        except OSError:
            time.sleep(0.05)
    return proc, port


def stop_server_proc(proc: subprocess.Popen) -> int:
    proc.send_signal(signal.SIGINT)
    try:
        return proc.wait(timeout=10)
    except subprocess.TimeoutExpired:
        proc.kill()
        raise


@pytest.mark.integration
def test_serve_node_history_end_to_end(tmp_path, capsys):
    config_path = write_server_config(tmp_path)
    proc, port = start_server_proc(config_path)
    try:
        # A scripted crossing: clear, 1 s at 15 cm, clear again.
        distance_script = tmp_path / "walk.json"
        distance_script.write_text(json.dumps({
            "duration_ms": 2500,
            "steps": [
                {"at_ms": 500, "distance_cm": 15},
                {"at_ms": 1500, "distance_cm": None},
            ],
        }))
        node = subprocess.run(
            [sys.executable, "-m", "borderwatch", "node",
             "--server", f"127.0.0.1:{port}", "--auth", DEVICE_TOKEN,
             "--distance-source", "script", "--distance-script", str(distance_script)],
            capture_output=True, text=True, timeout=30,
        )
        assert node.returncode == 0, node.stderr

        code = main(["history", "--server", f"127.0.0.1:{port}",
                     "--auth", OP_TOKEN, "--json"])
        assert code == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1
        event = json.loads(out[0])
        assert event["device_id"] == "gate-1"
        assert event["text"] == "==> Motion detected"
    finally:
        assert stop_server_proc(proc) == 0

    # The store survived the SIGINT shutdown.
    assert (tmp_path / "events.log").exists()
    reopened, port2 = start_server_proc(config_path)
    try:
        pass
    finally:
        stop_server_proc(reopened)


@pytest.mark.integration
def test_node_stdin_distance_creates_notification(tmp_path, capsys):
    config_path = write_server_config(tmp_path)
    proc, port = start_server_proc(config_path)
    try:
        node = subprocess.run(
            [sys.executable, "-m", "borderwatch", "node",
             "--server", f"127.0.0.1:{port}", "--auth", DEVICE_TOKEN,
             "--distance-source", "stdin"],
            input="15\nquit\n", capture_output=True, text=True, timeout=30,
        )
        assert node.returncode == 0, node.stderr

        code = main(["history", "--server", f"127.0.0.1:{port}",
                     "--auth", OP_TOKEN, "--json"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1
    finally:
        stop_server_proc(proc)


@pytest.mark.integration
def test_node_bad_token_exits_3(tmp_path):
    config_path = write_server_config(tmp_path)
    proc, port = start_server_proc(config_path)
    try:
        node = subprocess.run(
            [sys.executable, "-m", "borderwatch", "node",
             "--server", f"127.0.0.1:{port}", "--auth", "wrong-token",
             "--distance-source", "stdin"],
            input="", capture_output=True, text=True, timeout=30,
        )
        assert node.returncode == 3
    finally:
        stop_server_proc(proc)


@pytest.mark.integration
def test_history_bad_token_exits_3(tmp_path):
    config_path = write_server_config(tmp_path)
    proc, port = start_server_proc(config_path)
    try:
        code = main(["history", "--server", f"127.0.0.1:{port}", "--auth", "wrong"])
        assert code == 3
    finally:
        stop_server_proc(proc)


def test_history_unreachable_server_exits_4():
    # A port from the ephemeral range with nothing listening.
    assert main(["history", "--server", "127.0.0.1:1", "--auth", "x"]) == 4
