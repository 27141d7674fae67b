"""Minimal WebSocket (RFC 6455) framing for the browser-facing endpoint.

Covers exactly what the console channel needs: the server-side upgrade
handshake, text frames with client masking, fragmentation reassembly,
ping/pong, and close. One WebSocket text message carries one wire
frame. Client-side helpers exist so tests (and the CLI, if ever needed)
can speak the same dialect without a browser.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import os
import struct

GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA

_CONTROL_OPS = (OP_CLOSE, OP_PING, OP_PONG)


class WsError(Exception):
    """Protocol violation on the WebSocket layer."""


def compute_accept(key: str) -> str:
    digest = hashlib.sha1((key + GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def handshake_response(key: str) -> bytes:
    return (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {compute_accept(key)}\r\n"
        "\r\n"
    ).encode("ascii")


def client_handshake_request(host: str, path: str = "/ws",
                             key: str | None = None) -> tuple[bytes, str]:
    if key is None:
        key = base64.b64encode(os.urandom(16)).decode("ascii")
    request = (
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n"
        "\r\n"
    ).encode("ascii")
    return request, key


def encode_frame(opcode: int, payload: bytes, mask: bool = False) -> bytes:
    header = bytearray([0x80 | opcode])
    length = len(payload)
    mask_bit = 0x80 if mask else 0
    if length < 126:
        header.append(mask_bit | length)
    elif length < 1 << 16:
        header.append(mask_bit | 126)
        header += struct.pack(">H", length)
    else:
        header.append(mask_bit | 127)
        header += struct.pack(">Q", length)
    if mask:
        key = os.urandom(4)
        header += key
        payload = _apply_mask(payload, key)
    return bytes(header) + payload


def encode_text(text: str | bytes, mask: bool = False) -> bytes:
    payload = text.encode("utf-8") if isinstance(text, str) else text
    return encode_frame(OP_TEXT, payload, mask=mask)


def encode_close(code: int = 1000, mask: bool = False) -> bytes:
    return encode_frame(OP_CLOSE, struct.pack(">H", code), mask=mask)


def encode_pong(data: bytes, mask: bool = False) -> bytes:
    return encode_frame(OP_PONG, data, mask=mask)


def _apply_mask(payload: bytes, key: bytes) -> bytes:
    out = bytearray(payload)
    for i in range(len(out)):
        out[i] ^= key[i % 4]
    return bytes(out)


async def _read_frame(reader: asyncio.StreamReader, max_size: int) -> tuple[bool, int, bytes]:
    head = await reader.readexactly(2)
    fin = bool(head[0] & 0x80)
    opcode = head[0] & 0x0F
    masked = bool(head[1] & 0x80)
    length = head[1] & 0x7F
    if length == 126:
        length = struct.unpack(">H", await reader.readexactly(2))[0]
    elif length == 127:
        length = struct.unpack(">Q", await reader.readexactly(8))[0]
    if length > max_size:
        raise WsError(f"frame of {length} bytes exceeds cap {max_size}")
    key = await reader.readexactly(4) if masked else b""
    payload = await reader.readexactly(length) if length else b""
    if masked:
        payload = _apply_mask(payload, key)
    return fin, opcode, payload


async def read_message(reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                       max_size: int = 1 << 16, *,
                       mask_replies: bool = False) -> tuple[int, bytes]:
    """Next data message (opcode, payload); handles control frames inline.

    Returns (OP_CLOSE, payload) when the peer closes. Fragmented data
    messages are reassembled up to max_size.
    """
    message = bytearray()
    message_op: int | None = None
    while True:
        fin, opcode, payload = await _read_frame(reader, max_size)
        if opcode in _CONTROL_OPS:
            if not fin:
                raise WsError("fragmented control frame")
            if opcode == OP_PING:
                writer.write(encode_pong(payload, mask=mask_replies))
                continue
            if opcode == OP_PONG:
                continue
            return OP_CLOSE, payload
        if opcode in (OP_TEXT, OP_BINARY):
            if message_op is not None:
                raise WsError("new data frame inside a fragmented message")
            message_op = opcode
        elif opcode == OP_CONT:
            if message_op is None:
                raise WsError("continuation without a start frame")
        else:
            raise WsError(f"unsupported opcode {opcode:#x}")
        message += payload
        if len(message) > max_size:
            raise WsError("fragmented message exceeds cap")
        if fin:
            return message_op, bytes(message)


async def accept(reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 headers: dict[str, str]) -> None:
    """Complete the server side of the upgrade (request line already read)."""
    key = headers.get("sec-websocket-key")
    if not key or headers.get("upgrade", "").lower() != "websocket":
        raise WsError("not a websocket upgrade request")
    writer.write(handshake_response(key))
    await writer.drain()


async def connect_client(host: str, port: int, path: str = "/ws"):
    """Open a client socket and run the upgrade; for tests and tooling."""
    reader, writer = await asyncio.open_connection(host, port)
    request, _key = client_handshake_request(f"{host}:{port}", path)
    writer.write(request)
    await writer.drain()
    status = await reader.readline()
    if b"101" not in status:
        raise WsError(f"upgrade refused: {status!r}")
    while True:
        line = await reader.readline()
        if line in (b"\r\n", b"\n", b""):
            break
    return reader, writer
