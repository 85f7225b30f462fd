"""Browser gateway: WebSocket command channel plus static file serving.

A peer process can expose its engine to a web client. The gateway listens
on its own port inside the peer's socket loop; plain GETs serve the bundled
web client from a static directory, and a WebSocket upgrade opens the
command channel.

Gateway wire protocol (JSON text messages):
  client -> server  {"action": ..., ...extra fields, "seq": optional echo}
  server -> client  {"type": "cmd_result", "seq": ..., "ok": ..., ...}
                    {"type": "ui_state", ...engine view...}
                    {"type": "ui_chat", "from": ..., "text": ..., ...}
                    {"type": "ui_request_outcome", "outcome": ...}
                    {"type": "ui_error", "code": ..., "message": ...}

Every connected client receives ui_* pushes; cmd_result goes only to the
issuing client. A fresh client is greeted with the current ui_state.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import socket
import struct
from typing import Dict, List, Optional

from .net import Conn, TcpDriver, listen_socket

log = logging.getLogger(__name__)

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
MAX_HTTP_HEADER = 16 * 1024
MAX_WS_PAYLOAD = 256 * 1024

CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


def ws_accept_key(key: str) -> str:
    digest = hashlib.sha1((key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def ws_text_frame(payload: bytes) -> bytes:
    n = len(payload)
    if n < 126:
        head = struct.pack("!BB", 0x81, n)
    elif n < 1 << 16:
        head = struct.pack("!BBH", 0x81, 126, n)
    else:
        head = struct.pack("!BBQ", 0x81, 127, n)
    return head + payload


class GatewayConn(Conn):
    """One browser connection; speaks HTTP until upgraded, then WebSocket."""

    def __init__(self, gateway: "Gateway", sock: socket.socket):
        self.gateway = gateway
        self.driver = gateway.driver
        self.sock = sock
        self.buf = bytearray()
        self.outbuf = bytearray()
        self.mode = "http"
        self.close_after_write = False
        self.closed = False

    # ------------------------------------------------------------- loop API

    def wants_write(self) -> bool:
        return bool(self.outbuf)

    def on_writable(self) -> None:
        if self.outbuf:
            try:
                sent = self.sock.send(bytes(self.outbuf))
                del self.outbuf[:sent]
            except (BlockingIOError, InterruptedError):
                pass
            except OSError:
                self.gateway.drop(self)
                return
        if not self.outbuf and self.close_after_write:
            self.gateway.drop(self)
            return
        self.driver.update_interest(self)

    def on_readable(self) -> None:
        try:
            data = self.sock.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self.gateway.drop(self)
            return
        if not data:
            self.gateway.drop(self)
            return
        self.buf.extend(data)
        if self.mode == "http":
            self._try_http()
        if self.mode == "ws":
            self._drain_ws_frames()

    def send_bytes(self, data: bytes) -> None:
        self.outbuf += data
        self.driver.update_interest(self)

    def send_json(self, msg: dict) -> None:
        if self.mode == "ws":
            self.send_bytes(ws_text_frame(json.dumps(msg).encode("utf-8")))

    # ----------------------------------------------------------------- http

    def _try_http(self) -> None:
        end = self.buf.find(b"\r\n\r\n")
        if end < 0:
            if len(self.buf) > MAX_HTTP_HEADER:
                self.gateway.drop(self)
            return
        head = bytes(self.buf[:end]).decode("latin-1")
        del self.buf[: end + 4]
        lines = head.split("\r\n")
        parts = lines[0].split(" ")
        if len(parts) != 3:
            self.gateway.drop(self)
            return
        method, target, _version = parts
        headers: Dict[str, str] = {}
        for line in lines[1:]:
            name, _, value = line.partition(":")
            headers[name.strip().lower()] = value.strip()
        if (
            headers.get("upgrade", "").lower() == "websocket"
            and "sec-websocket-key" in headers
        ):
            self._upgrade(headers["sec-websocket-key"])
            return
        if method != "GET":
            self._respond(405, b"method not allowed", "text/plain; charset=utf-8")
            return
        self._serve_static(target.split("?", 1)[0])

    def _upgrade(self, key: str) -> None:
        self.mode = "ws"
        self.send_bytes(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                "Sec-WebSocket-Accept: %s\r\n\r\n" % ws_accept_key(key)
            ).encode("ascii")
        )
        self.gateway.on_client_ready(self)

    def _respond(self, status: int, body: bytes, ctype: str) -> None:
        reason = {200: "OK", 404: "Not Found", 405: "Method Not Allowed"}.get(status, "?")
        self.send_bytes(
            (
                "HTTP/1.1 %d %s\r\n"
                "Content-Type: %s\r\n"
                "Content-Length: %d\r\n"
                "Cache-Control: no-store\r\n"
                "Connection: close\r\n\r\n" % (status, reason, ctype, len(body))
            ).encode("ascii")
            + body
        )
        self.close_after_write = True

    def _serve_static(self, path: str) -> None:
        root = self.gateway.static_dir
        if root is None:
            self._respond(404, b"no static content configured", "text/plain; charset=utf-8")
            return
        rel = path.lstrip("/") or "index.html"
        full = os.path.realpath(os.path.join(root, rel))
        if not full.startswith(os.path.realpath(root) + os.sep) and full != os.path.realpath(
            os.path.join(root, "index.html")
        ):
            self._respond(404, b"not found", "text/plain; charset=utf-8")
            return
        if os.path.isdir(full):
            full = os.path.join(full, "index.html")
        if not os.path.isfile(full):
            self._respond(404, b"not found", "text/plain; charset=utf-8")
            return
        ext = os.path.splitext(full)[1].lower()
        with open(full, "rb") as fh:
            body = fh.read()
        self._respond(200, body, CONTENT_TYPES.get(ext, "application/octet-stream"))

    # ------------------------------------------------------------ websocket

    def _drain_ws_frames(self) -> None:
        while True:
            frame = self._parse_ws_frame()
            if frame is None:
                return
            opcode, payload = frame
            if opcode == 8:  # close
                self.send_bytes(b"\x88\x00")
                self.close_after_write = True
                return
            if opcode == 9:  # ping -> pong
                self.send_bytes(b"\x8a" + bytes([len(payload)]) + payload)
                continue
            if opcode == 1:
                self.gateway.on_client_message(self, payload)

    def _parse_ws_frame(self) -> Optional[tuple]:
        buf = self.buf
        if len(buf) < 2:
            return None
        b0, b1 = buf[0], buf[1]
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        offset = 2
        if length == 126:
            if len(buf) < 4:
                return None
            length = struct.unpack("!H", bytes(buf[2:4]))[0]
            offset = 4
        elif length == 127:
            if len(buf) < 10:
                return None
            length = struct.unpack("!Q", bytes(buf[2:10]))[0]
            offset = 10
        if length > MAX_WS_PAYLOAD or not masked:
            # clients must mask; anything else is a broken peer
            self.gateway.drop(self)
            return None
        if len(buf) < offset + 4 + length:
            return None
        mask = bytes(buf[offset : offset + 4])
        raw = bytes(buf[offset + 4 : offset + 4 + length])
        del buf[: offset + 4 + length]
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(raw))
        return opcode, payload


class Gateway:
    """Bridges one peer engine to any number of browser clients."""

    def __init__(
        self,
        driver: TcpDriver,
        engine,
        address: str,
        static_dir: Optional[str] = None,
    ):
        self.driver = driver
        self.engine = engine
        self.static_dir = static_dir
        self.clients: List[GatewayConn] = []
        self.listener = listen_socket(address)
        driver.add_listener(self.listener, self._accept)
        engine._ui = self.broadcast

    @property
    def port(self) -> int:
        return self.listener.getsockname()[1]

    def _accept(self, sock: socket.socket) -> None:
        self.driver.register(GatewayConn(self, sock))

    def drop(self, conn: GatewayConn) -> None:
        if conn in self.clients:
            self.clients.remove(conn)
        self.driver.drop(conn)

    def on_client_ready(self, conn: GatewayConn) -> None:
        self.clients.append(conn)
        conn.send_json(self.engine.view(self.driver.now_ms()))

    def on_client_message(self, conn: GatewayConn, payload: bytes) -> None:
        try:
            cmd = json.loads(payload.decode("utf-8"))
            if not isinstance(cmd, dict):
                raise ValueError("command must be an object")
        except (ValueError, UnicodeDecodeError):
            conn.send_json({"type": "ui_error", "code": "BadCommand", "message": "unparseable command"})
            return
        seq = cmd.pop("seq", None)
        result = self.engine.handle_command(cmd, self.driver.now_ms())
        out = {"type": "cmd_result", "seq": seq}
        out.update(result)
        conn.send_json(out)
        self.driver.pump()

    def broadcast(self, msg: dict) -> None:
        for conn in list(self.clients):
            conn.send_json(msg)

    def close(self) -> None:
        for conn in list(self.clients):
            self.drop(conn)
        self.listener.close()
