"""Command-line entry point.

Subcommands: serve (the relay server), node (a live simulated device),
simulate (scripted deterministic run), history (query stored events).
Exit codes are a stable contract: 0 success, 2 usage or config errors,
3 authentication rejected, 4 I/O failures.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from .node import DeviceNode, NodeConfig
from .protocol import HistoryRequest, HistoryResponse, Login, LoginAck, decode, encode
from .relay import ServerConfig
from .sensor import IrSensorConfig
from .simulate import ScenarioError, ScenarioScript, run_detailed
from .store import StoreError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_AUTH = 3
EXIT_IO = 4

logger = logging.getLogger("borderwatch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="borderwatch",
        description="Simulated IR border-intrusion pipeline: relay server, "
                    "device nodes, scenario runs, history queries.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the relay server")
    p_serve.add_argument("--config", required=True, help="server config JSON")
    p_serve.add_argument("--port", type=int, help="override the configured port")
    p_serve.add_argument("--store", help="override the configured store path")

    p_node = sub.add_parser("node", help="run one live simulated device")
    p_node.add_argument("--server", default="127.0.0.1:7420", help="host:port")
    p_node.add_argument("--auth", required=True, help="device auth token")
    p_node.add_argument("--distance-source", choices=("script", "stdin"),
                        default="stdin")
    p_node.add_argument("--distance-script", help="timeline JSON for --distance-source script")
    p_node.add_argument("--sample-period-ms", type=int, default=100)

    p_sim = sub.add_parser("simulate", help="run a scripted scenario")
    p_sim.add_argument("--script", required=True, help="scenario JSON")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--report", help="write the JSON report here (default stdout)")
    p_sim.add_argument("--figures", help="also render figures and events.csv into this directory")

    p_hist = sub.add_parser("history", help="query stored intrusion events")
    p_hist.add_argument("--server", default="127.0.0.1:7420", help="host:port")
    p_hist.add_argument("--auth", required=True, help="operator auth token")
    p_hist.add_argument("--from", dest="from_ms", type=int, default=0)
    p_hist.add_argument("--to", dest="to_ms", type=int, default=2**61)
    p_hist.add_argument("--device", help="filter by device id")
    p_hist.add_argument("--limit", type=int, default=100)
    p_hist.add_argument("--json", action="store_true", help="print raw JSON lines")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    handler = {
        "serve": cmd_serve,
        "node": cmd_node,
        "simulate": cmd_simulate,
        "history": cmd_history,
    }[args.command]
    return handler(args)


def _split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


# -- serve ---------------------------------------------------------------


def cmd_serve(args) -> int:
    try:
        config = ServerConfig.load(args.config)
    except (OSError, ValueError, KeyError) as exc:
        print(f"bad config {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.port is not None:
        config.port = args.port
    if args.store is not None:
        config.store_path = args.store

    from .server import LiveServer

    async def serve() -> int:
        try:
            server = LiveServer(config)
            await server.start()
        except StoreError as exc:
            print(f"store error: {exc}", file=sys.stderr)
            return EXIT_IO
        except OSError as exc:
            print(f"cannot bind {config.host}:{config.port}: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"listening on {config.host}:{server.port}, "
              f"{server.store.recovery.recovered_events} events recovered", flush=True)
        try:
            await server.serve_forever()
        except asyncio.CancelledError:
            pass
        finally:
            await server.stop()
        return EXIT_OK

    try:
        return asyncio.run(serve())
    except KeyboardInterrupt:
        return EXIT_OK


# -- node ----------------------------------------------------------------


class _ScriptDistances:
    """Stepwise distance timeline; None means clear path."""

    def __init__(self, steps: list[dict], duration_ms: int):
        self.steps = sorted(steps, key=lambda s: s["at_ms"])
        self.duration_ms = duration_ms

    def at(self, now_ms: int) -> float | None:
        current = None
        for step in self.steps:
            if step["at_ms"] <= now_ms:
                current = step["distance_cm"]
        return current

    def finished(self, now_ms: int) -> bool:
        return now_ms >= self.duration_ms


class _StdinDistances:
    """Distances typed on stdin; a number holds until 'clear' is typed."""

    def __init__(self):
        self.value: float | None = None
        self.eof = False

    def start(self, loop: asyncio.AbstractEventLoop) -> None:
        import threading

        def pump():
            for line in sys.stdin:
                text = line.strip().lower()
                if not text:
                    continue
                if text in ("clear", "c"):
                    loop.call_soon_threadsafe(self._set, None)
                elif text in ("quit", "q"):
                    break
                else:
                    try:
                        loop.call_soon_threadsafe(self._set, float(text))
                    except ValueError:
                        pass
            loop.call_soon_threadsafe(self._end)

        threading.Thread(target=pump, daemon=True).start()

    def _set(self, value: float | None) -> None:
        self.value = value

    def _end(self) -> None:
        self.eof = True

    def at(self, now_ms: int) -> float | None:
        return self.value

    def finished(self, now_ms: int) -> bool:
        return self.eof


def cmd_node(args) -> int:
    import random

    if args.distance_source == "script":
        if not args.distance_script:
            print("--distance-script is required with --distance-source script",
                  file=sys.stderr)
            return EXIT_CONFIG
        try:
            raw = json.loads(Path(args.distance_script).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"bad distance script: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        source = _ScriptDistances(raw.get("steps", []), raw.get("duration_ms", 0))
    else:
        source = _StdinDistances()

    try:
        host, port = _split_addr(args.server)
    except ValueError:
        print(f"bad server address {args.server!r}", file=sys.stderr)
        return EXIT_CONFIG

    cfg = NodeConfig(auth_token=args.auth, sample_period_ms=args.sample_period_ms)
    node = DeviceNode(cfg=cfg, sensor_cfg=IrSensorConfig())
    rng = random.Random(0)

    async def drive() -> int:
        import time

        from .node import Phase
        from .sensor import sample

        loop = asyncio.get_running_loop()
        if isinstance(source, _StdinDistances):
            source.start(loop)

        start = time.monotonic()
        writer: asyncio.StreamWriter | None = None
        inbox: asyncio.Queue = asyncio.Queue()
        reader_task: asyncio.Task | None = None
        last_attempt = -(10 ** 9)
        finish_deadline: int | None = None

        async def read_frames(reader: asyncio.StreamReader):
            try:
                while True:
                    line = await reader.readline()
                    if not line:
                        break
                    try:
                        inbox.put_nowait(decode(line))
                    except Exception:
                        pass
            finally:
                inbox.put_nowait(None)  # connection lost sentinel

        def now_ms() -> int:
            return int((time.monotonic() - start) * 1000)

        while True:
            now = now_ms()
            outbound = []

            lost = False
            while not inbox.empty():
                frame = inbox.get_nowait()
                if frame is None:
                    lost = True
                else:
                    outbound += node.handle_frame(now, frame)
            if lost and writer is not None:
                writer.close()
                writer = None

            if node.phase is Phase.AUTH_FAILED:
                print("authentication rejected", file=sys.stderr)
                return EXIT_AUTH

            if (writer is None and node.phase is not Phase.ONLINE
                    and now - last_attempt >= cfg.backoff_base_ms):
                last_attempt = now
                try:
                    reader, writer = await asyncio.open_connection(host, port)
                    reader_task = asyncio.ensure_future(read_frames(reader))
                except OSError:
                    writer = None

            outbound += node.advance_connection(now, link_up=writer is not None)

            distance = source.at(now)
            reading = sample(node.sensor_cfg, distance, rng)
            outbound += node.tick(now, reading)
            if node.led_on:
                logger.debug("detection LED on (reading below threshold)")

            if writer is not None:
                for msg in outbound:
                    writer.write(encode(msg))
                try:
                    await writer.drain()
                except (ConnectionError, OSError):
                    writer.close()
                    writer = None

            if source.finished(now) and node.pending_count == 0:
                # Hold on until the login outcome is known, so a bad token
                # still reports as an auth failure, not a clean exit.
                if node.phase is Phase.ONLINE:
                    if writer is not None:
                        writer.close()
                    if reader_task is not None:
                        reader_task.cancel()
                    return EXIT_OK
                if finish_deadline is None:
                    finish_deadline = now + 10_000
                elif now >= finish_deadline:
                    print("never reached the server", file=sys.stderr)
                    return EXIT_IO

            await asyncio.sleep(cfg.sample_period_ms / 1000)

    try:
        return asyncio.run(drive())
    except KeyboardInterrupt:
        return EXIT_OK
    except OSError as exc:
        print(f"connection failed: {exc}", file=sys.stderr)
        return EXIT_IO


# -- simulate ------------------------------------------------------------


def cmd_simulate(args) -> int:
    try:
        script = ScenarioScript.from_file(args.script)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"bad script {args.script}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report, events = run_detailed(script, seed=args.seed)
    except ScenarioError as exc:
        for violation in exc.violations:
            print(f"script violation: {violation}", file=sys.stderr)
        return EXIT_CONFIG

    payload = report.to_json_bytes()
    if args.report:
        try:
            Path(args.report).write_bytes(payload)
        except OSError as exc:
            print(f"cannot write report: {exc}", file=sys.stderr)
            return EXIT_IO
    else:
        sys.stdout.buffer.write(payload)

    if args.figures:
        from .figures import render_figures, write_events_csv
        try:
            outdir = Path(args.figures)
            outdir.mkdir(parents=True, exist_ok=True)
            write_events_csv(events, outdir / "events.csv")
            for path in render_figures(report, outdir):
                logger.info("wrote %s", path)
        except OSError as exc:
            print(f"cannot write figures: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


# -- history -------------------------------------------------------------


def cmd_history(args) -> int:
    try:
        host, port = _split_addr(args.server)
    except ValueError:
        print(f"bad server address {args.server!r}", file=sys.stderr)
        return EXIT_CONFIG

    async def fetch() -> int:
        try:
            reader, writer = await asyncio.open_connection(host, port)
        except OSError as exc:
            print(f"cannot connect to {args.server}: {exc}", file=sys.stderr)
            return EXIT_IO
        writer.write(encode(Login(role="operator", auth=args.auth)))
        await writer.drain()
        ack = decode(await reader.readline())
        if not isinstance(ack, LoginAck) or not ack.ok:
            print("operator login rejected", file=sys.stderr)
            return EXIT_AUTH
        writer.write(encode(HistoryRequest(
            from_ms=args.from_ms, to_ms=args.to_ms,
            limit=args.limit, device_id=args.device,
        )))
        await writer.drain()
        resp = decode(await reader.readline())
        writer.close()
        if not isinstance(resp, HistoryResponse):
            print(f"unexpected response: {resp}", file=sys.stderr)
            return EXIT_IO
        _print_events(resp, as_json=args.json)
        return EXIT_OK

    try:
        return asyncio.run(fetch())
    except (OSError, asyncio.IncompleteReadError) as exc:
        print(f"history query failed: {exc}", file=sys.stderr)
        return EXIT_IO


def _print_events(resp: HistoryResponse, as_json: bool) -> None:
    if as_json:
        for event in resp.events:
            sys.stdout.buffer.write(encode(event))
        return
    from datetime import datetime, timezone

    print(f"{'id':>6}  {'device':<16} {'server time (UTC)':<24} text")
    for e in resp.events:
        stamp = datetime.fromtimestamp(e.ts_ms / 1000, tz=timezone.utc)
        print(f"{e.event_id:>6}  {e.device_id:<16} "
              f"{stamp.strftime('%Y-%m-%d %H:%M:%S.%f')[:-3]:<24} {e.text}")


if __name__ == "__main__":
    sys.exit(main())
