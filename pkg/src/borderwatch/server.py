"""Live relay server: one listening port, three faces.

A fresh connection is sniffed by its first line. Lines starting with an
HTTP method are routed to the WebSocket upgrade (path /ws) or the
static file handler (the browser console assets); anything else is
treated as the first frame of a plain newline-delimited JSON session.
All three faces drive the same RelayCore, so a device on raw TCP, a
test client on NDJSON, and a browser console on WebSocket see identical
behavior.
"""

from __future__ import annotations

import asyncio
import logging
from pathlib import Path

from . import websocket as ws
from .protocol import MAX_FRAME_BYTES, DecodeError, Error, Message, decode, encode
from .relay import RelayCore, ServerConfig
from .store import EventStore

logger = logging.getLogger(__name__)

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".ico": "image/x-icon",
}

_HTTP_METHODS = (b"GET ", b"HEAD ", b"POST ", b"PUT ", b"DELETE ", b"OPTIONS ")


class _StreamChannel:
    """NDJSON leg: one encoded frame per send."""

    def __init__(self, writer: asyncio.StreamWriter):
        self._writer = writer

    def send(self, msg: Message) -> None:
        if not self._writer.is_closing():
            self._writer.write(encode(msg))

    def close(self) -> None:
        if not self._writer.is_closing():
            self._writer.close()


class _WsChannel:
    """WebSocket leg: one text message per frame, no trailing LF."""

    def __init__(self, writer: asyncio.StreamWriter):
        self._writer = writer

    def send(self, msg: Message) -> None:
        if not self._writer.is_closing():
            self._writer.write(ws.encode_text(encode(msg)[:-1]))

    def close(self) -> None:
        if not self._writer.is_closing():
            self._writer.write(ws.encode_close())
            self._writer.close()


class LiveServer:
    def __init__(self, config: ServerConfig, store: EventStore | None = None):
        self.config = config
        self.store = store if store is not None else EventStore.open(config.store_path)
        self.core = RelayCore(config.devices, config.operators, self.store,
                              template=config.template)
        self._server: asyncio.AbstractServer | None = None
        self.port: int | None = None

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle_conn, self.config.host, self.config.port,
            limit=MAX_FRAME_BYTES,
        )
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info("listening on %s:%d (store: %d events recovered)",
                    self.config.host, self.port, self.store.recovery.recovered_events)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self.store.close()

    # -- connection dispatch ------------------------------------------

    async def _handle_conn(self, reader: asyncio.StreamReader,
                           writer: asyncio.StreamWriter) -> None:
        try:
            first = await reader.readline()
        except (ValueError, ConnectionError):
            writer.close()
            return
        if not first:
            writer.close()
            return
        try:
            if first.startswith(_HTTP_METHODS):
                await self._handle_http(first, reader, writer)
            else:
                await self._handle_ndjson(first, reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        except Exception:
            logger.exception("connection handler failed")
        finally:
            writer.close()

    # -- NDJSON face ----------------------------------------------------

    async def _handle_ndjson(self, first: bytes, reader: asyncio.StreamReader,
                             writer: asyncio.StreamWriter) -> None:
        conn = self.core.connect(_StreamChannel(writer))
        try:
            line = first
            while line:
                self._dispatch(conn, line)
                if conn.closed or writer.is_closing():
                    break
                try:
                    line = await reader.readline()
                except ValueError:
                    # Over-long line: framing fault, drop the connection.
                    logger.warning("frame over %d bytes, closing", MAX_FRAME_BYTES)
                    break
            await _drain_quietly(writer)
        finally:
            self.core.disconnect(conn)

    def _dispatch(self, conn, line: bytes) -> None:
        if not line.strip():
            return
        try:
            msg = decode(line)
        except DecodeError as exc:
            conn.channel.send(Error(code="decode", detail=str(exc)))
            if conn.role is None:
                self.core.disconnect(conn)
                conn.channel.close()
            return
        self.core.handle_frame(conn, msg)

    # -- HTTP / WebSocket face -------------------------------------------

    async def _handle_http(self, first: bytes, reader: asyncio.StreamReader,
                           writer: asyncio.StreamWriter) -> None:
        try:
            method, path, _ = first.decode("latin-1").split(" ", 2)
        except ValueError:
            writer.write(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            return
        headers: dict[str, str] = {}
        while True:
            line = await reader.readline()
            if line in (b"\r\n", b"\n", b""):
                break
            name, _, value = line.decode("latin-1").partition(":")
            headers[name.strip().lower()] = value.strip()

        if path == "/ws" and headers.get("upgrade", "").lower() == "websocket":
            await ws.accept(reader, writer, headers)
            await self._handle_ws(reader, writer)
        elif method == "GET":
            self._serve_static(path, writer)
            await _drain_quietly(writer)
        else:
            writer.write(b"HTTP/1.1 405 Method Not Allowed\r\n\r\n")

    async def _handle_ws(self, reader: asyncio.StreamReader,
                         writer: asyncio.StreamWriter) -> None:
        conn = self.core.connect(_WsChannel(writer))
        try:
            while not conn.closed and not writer.is_closing():
                try:
                    opcode, payload = await ws.read_message(reader, writer,
                                                            max_size=MAX_FRAME_BYTES)
                except ws.WsError as exc:
                    logger.warning("websocket fault: %s", exc)
                    break
                if opcode == ws.OP_CLOSE:
                    break
                self._dispatch(conn, payload)
            await _drain_quietly(writer)
        finally:
            self.core.disconnect(conn)

    def _serve_static(self, path: str, writer: asyncio.StreamWriter) -> None:
        root = self.config.static_dir
        if root is None:
            writer.write(b"HTTP/1.1 404 Not Found\r\n\r\nno static assets configured\n")
            return
        rel = path.split("?", 1)[0].lstrip("/") or "index.html"
        target = (Path(root) / rel).resolve()
        root_resolved = Path(root).resolve()
        if not str(target).startswith(str(root_resolved)) or not target.is_file():
            writer.write(b"HTTP/1.1 404 Not Found\r\n\r\n")
            return
        body = target.read_bytes()
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        head = (
            "HTTP/1.1 200 OK\r\n"
            f"Content-Type: {ctype}\r\n"
            f"Content-Length: {len(body)}\r\n"
            "Connection: close\r\n"
            "\r\n"
        ).encode("ascii")
        writer.write(head + body)


async def _drain_quietly(writer: asyncio.StreamWriter) -> None:
    try:
        await writer.drain()
    except (ConnectionError, RuntimeError):
        pass


async def run_server(config: ServerConfig) -> None:
    """Bind, recover the store, and serve until cancelled."""
    server = LiveServer(config)
    try:
        await server.serve_forever()
    finally:
        await server.stop()
