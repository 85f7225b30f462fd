"""Live TCP driver.

Runs one protocol node (a peer engine or the registry service) on real
sockets. The node side is identical to the simulator's contract: decoded
frames and timer ticks go in with a millisecond clock, outgoing frames are
drained from the node and routed by address.

Addresses on the live network are "host:port" strings; every node listens
on its advertised address. Connections are dialed lazily on first send and
reused in both directions: each incoming frame carries the sender's
advertised address in `src`, so replies ride the already-open socket
instead of dialing back. If a socket dies the route is forgotten and the
link layer's retransmits trigger a fresh dial; per-address delivery state
lives in the endpoints, not the socket, so a reconnect resumes cleanly.

The loop is single threaded. Other threads may inject work with post(),
which wakes the selector through a pipe.
"""

from __future__ import annotations

import errno
import logging
import os
import selectors
import socket
import time
from typing import Callable, Dict, List, Optional, Tuple

from . import wire

log = logging.getLogger(__name__)

SELECT_SLICE_S = 0.5  # upper bound on sleep so liveness ticks keep flowing


def parse_address(address: str) -> Tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


def listen_socket(address: str) -> socket.socket:
    host, port = parse_address(address)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(64)
    sock.setblocking(False)
    return sock


class Conn:
    """Base class for anything registered with the loop's selector."""

    sock: socket.socket

    def wants_write(self) -> bool:
        return False

    def on_readable(self) -> None:  # pragma: no cover - interface
        pass

    def on_writable(self) -> None:  # pragma: no cover - interface
        pass


class FrameConn(Conn):
    """One TCP connection carrying length-prefixed frames."""

    def __init__(self, driver: "TcpDriver", sock: socket.socket, connecting: bool = False):
        self.driver = driver
        self.sock = sock
        self.decoder = wire.FrameDecoder()
        self.outbuf = bytearray()
        self.connecting = connecting
        self.closed = False

    def wants_write(self) -> bool:
        return self.connecting or bool(self.outbuf)

    def send_frame(self, frame: dict) -> None:
        self.outbuf += wire.encode_frame(frame)
        self.driver.update_interest(self)

    def on_readable(self) -> None:
        try:
            data = self.sock.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self.driver.drop(self)
            return
        if not data:
            self.driver.drop(self)
            return
        try:
            frames = self.decoder.feed(data)
        except wire.BadFrame:
            self.driver.drop(self)
            return
        now = self.driver.now_ms()
        for frame in frames:
            src = frame.get("src")
            if not isinstance(src, str):
                continue
            self.driver.routes[src] = self
            self.driver.node_frame(src, frame, now)

    def on_writable(self) -> None:
        if self.connecting:
            err = self.sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
            if err not in (0, errno.EISCONN):
                self.driver.drop(self)
                return
            self.connecting = False
        if self.outbuf:
            try:
                sent = self.sock.send(bytes(self.outbuf))
                del self.outbuf[:sent]
            except (BlockingIOError, InterruptedError):
                pass
            except OSError:
                self.driver.drop(self)
                return
        self.driver.update_interest(self)


class TcpDriver:
    def __init__(
        self,
        address: str,
        handle_frame: Callable[[str, dict, int], None],
        on_timer: Callable[[int], None],
        next_wakeup: Callable[[], Optional[int]],
        drain: Callable[[], List[Tuple[str, dict]]],
        listen: bool = True,
        listener: Optional[socket.socket] = None,
    ):
        self.address = address
        self._handle_frame = handle_frame
        self._on_timer = on_timer
        self._next_wakeup = next_wakeup
        self._drain = drain

        self.sel = selectors.DefaultSelector()
        self.routes: Dict[str, FrameConn] = {}
        self.conns: List[Conn] = []
        self._t0 = time.monotonic()
        self._stopping = False
        self._posted: List[Callable[[], None]] = []
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)
        self.sel.register(self._wake_r, selectors.EVENT_READ, ("wakeup", None))

        self.listener: Optional[socket.socket] = listener
        if self.listener is None and listen:
            self.listener = listen_socket(address)
        if self.listener is not None:
            self.sel.register(self.listener, selectors.EVENT_READ, ("accept", self._accept_frame_conn))

    # ------------------------------------------------------------- plumbing

    def now_ms(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    @property
    def port(self) -> int:
        assert self.listener is not None
        return self.listener.getsockname()[1]

    def add_listener(self, sock: socket.socket, on_accept: Callable[[socket.socket], None]) -> None:
        """Attach an extra listening socket (the browser gateway uses this)."""
        self.sel.register(sock, selectors.EVENT_READ, ("accept", on_accept))

    def register(self, conn: Conn) -> None:
        conn.sock.setblocking(False)
        self.conns.append(conn)
        self.sel.register(conn.sock, self._mask(conn), ("conn", conn))

    def _mask(self, conn: Conn) -> int:
        mask = selectors.EVENT_READ
        if conn.wants_write():
            mask |= selectors.EVENT_WRITE
        return mask

    def update_interest(self, conn: Conn) -> None:
        if getattr(conn, "closed", False):
            return
        try:
            self.sel.modify(conn.sock, self._mask(conn), ("conn", conn))
        except (KeyError, ValueError):
            pass

    def drop(self, conn: Conn) -> None:
        if getattr(conn, "closed", False):
            return
        conn.closed = True
        try:
            self.sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        try:
            conn.sock.close()
        except OSError:
            pass
        if conn in self.conns:
            self.conns.remove(conn)
        for addr in [a for a, c in self.routes.items() if c is conn]:
            del self.routes[addr]

    def _accept_frame_conn(self, sock: socket.socket) -> None:
        self.register(FrameConn(self, sock))

    def _connect(self, address: str) -> Optional[FrameConn]:
        host, port = parse_address(address)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setblocking(False)
        try:
            sock.connect((host, port))
        except BlockingIOError:
            pass
        except OSError as e:
            log.debug("dial %s failed: %s", address, e)
            sock.close()
            return None
        conn = FrameConn(self, sock, connecting=True)
        self.register(conn)
        self.routes[address] = conn
        return conn

    # ----------------------------------------------------------- node side

    def node_frame(self, src: str, frame: dict, now: int) -> None:
        self._handle_frame(src, frame, now)
        self.pump()

    def post(self, fn: Callable[[], None]) -> None:
        """Queue fn to run on the loop thread; safe to call from any thread."""
        self._posted.append(fn)
        os.write(self._wake_w, b"x")

    def pump(self) -> None:
        for dst, frame in self._drain():
            conn = self.routes.get(dst)
            if conn is None or conn.closed:
                conn = self._connect(dst)
            if conn is None:
                continue  # dial failed; retransmits will try again
            try:
                conn.send_frame(frame)
            except wire.FrameTooLarge:
                log.warning("oversized frame to %s dropped", dst)

    def stop(self) -> None:
        self._stopping = True
        os.write(self._wake_w, b"x")

    # ----------------------------------------------------------------- loop

    def run(self, duration_ms: Optional[int] = None) -> None:
        deadline = None if duration_ms is None else self.now_ms() + duration_ms
        self.pump()
        while not self._stopping:
            now = self.now_ms()
            if deadline is not None and now >= deadline:
                break
            timeout = SELECT_SLICE_S
            wake = self._next_wakeup()
            if wake is not None:
                timeout = min(timeout, max(wake - now, 0) / 1000.0)
            if deadline is not None:
                timeout = min(timeout, max(deadline - now, 0) / 1000.0)
            for key, _events in self.sel.select(timeout):
                tag, payload = key.data
                if tag == "wakeup":
                    try:
                        os.read(self._wake_r, 4096)
                    except OSError:
                        pass
                elif tag == "accept":
                    try:
                        sock, _addr = key.fileobj.accept()
                    except OSError:
                        continue
                    payload(sock)
                else:
                    conn = payload
                    if _events & selectors.EVENT_WRITE:
                        conn.on_writable()
                    if not conn.closed and _events & selectors.EVENT_READ:
                        conn.on_readable()
            posted, self._posted = self._posted, []
            for fn in posted:
                fn()
            self._on_timer(self.now_ms())
            self.pump()

    def close(self) -> None:
        self._stopping = True
        for conn in list(self.conns):
            self.drop(conn)
        if self.listener is not None:
            try:
                self.sel.unregister(self.listener)
            except (KeyError, ValueError):
                pass
            self.listener.close()
        os.close(self._wake_r)
        os.close(self._wake_w)
        self.sel.close()
