"""Live loopback runs: the same nodes over real TCP sockets.

Each test spins up a registry and a few peers on 127.0.0.1 with shortened
protocol timers, then drives them from the test thread through the loop's
post() injection. The gateway test speaks raw HTTP and RFC 6455 frames so
the server side is exercised against an independent client encoding.
"""

import base64
import json
import os
import random
import socket
import struct
import threading
import time

import pytest

from coplay.gateway import Gateway, ws_accept_key
from coplay.model import CoursewareManifest
from coplay.net import TcpDriver, listen_socket
from coplay.peer import PeerConfig, PeerEngine, PeerPhase
from coplay.registry import Registry
from coplay.registry_node import RegistryNode

MANIFEST = CoursewareManifest.from_dict(
    {
        "course_id": "live-course",
        "lecture_id": "live-lecture",
        "slide_count": 6,
        "duration_ms": 60000,
        "slide_start_ms": [0, 10000, 20000, 30000, 40000, 50000],
    }
)

FAST = dict(
    heartbeat_ms=100,
    liveness_timeout_ms=350,
    failover_backoff_ms=150,
    retransmit_initial_ms=60,
    retransmit_max_ms=240,
    join_timeout_ms=4000,
    join_retry_ms=80,
)


def wait_until(pred, timeout=6.0, step=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return False


class LivePeer:
    def __init__(self, name, registry_addr, create=False, static_dir=None, with_gateway=False):
        listener = listen_socket("127.0.0.1:0")
        self.address = "127.0.0.1:%d" % listener.getsockname()[1]
        cfg = PeerConfig(
            name=name,
            address=self.address,
            registry=registry_addr,
            course=MANIFEST.course_id,
            create=create,
            **FAST,
        )
        self.engine = PeerEngine(cfg, MANIFEST)
        self.driver = TcpDriver(
            self.address,
            self.engine.handle_frame,
            self.engine.on_timer,
            self.engine.next_wakeup,
            self.engine.endpoint.drain,
            listener=listener,
        )
        self.gateway = (
            Gateway(self.driver, self.engine, "127.0.0.1:0", static_dir)
            if with_gateway
            else None
        )
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        self.engine.start(self.driver.now_ms())
        self.driver.run()

    def start(self):
        self.thread.start()
        return self

    def command(self, cmd):
        out = {}
        done = threading.Event()

        def apply():
            out.update(self.engine.handle_command(cmd, self.driver.now_ms()))
            self.driver.pump()
            done.set()

        self.driver.post(apply)
        assert done.wait(3.0), "loop did not process the command"
        return out

    def silence(self):
        """Stop the loop without closing sockets: looks like a crash."""
        self.driver.stop()
        self.thread.join(3.0)

    def stop(self):
        self.driver.stop()
        self.thread.join(3.0)
        if self.gateway is not None:
            self.gateway.close()
        self.driver.close()


@pytest.fixture
def live_registry():
    listener = listen_socket("127.0.0.1:0")
    address = "127.0.0.1:%d" % listener.getsockname()[1]
    registry = Registry([MANIFEST.course_id], randbits=random.Random(99).getrandbits)
    node = RegistryNode(registry, address)
    driver = TcpDriver(
        address, node.handle_frame, node.on_timer, node.next_wakeup, node.drain,
        listener=listener,
    )
    thread = threading.Thread(target=driver.run, daemon=True)
    thread.start()
    peers = []

    class Handle:
        def __init__(self):
            self.address = address
            self.registry = registry

        def peer(self, *args, **kwargs):
            p = LivePeer(*args, registry_addr=address, **kwargs).start()
            peers.append(p)
            return p

    yield Handle()
    for p in peers:
        p.driver.stop()
        p.thread.join(3.0)
        p.driver.close()
    driver.stop()
    thread.join(3.0)
    driver.close()


def test_live_session_forms_and_syncs(live_registry):
    alice = live_registry.peer("alice", create=True)
    assert wait_until(lambda: alice.engine.phase is PeerPhase.LEADING)
    bob = live_registry.peer("bob")
    assert wait_until(lambda: bob.engine.phase is PeerPhase.FOLLOWING)
    assert bob.engine.leader == "alice"

    out = alice.command({"action": "slide", "index": 2})
    assert out["ok"] is True
    assert wait_until(lambda: bob.engine.state.slide_index == 2)

    out = alice.command({"action": "play"})
    assert out["ok"] is True
    assert wait_until(lambda: bob.engine.state.playing)

    bob.command({"action": "chat", "text": "can you hear me"})
    assert wait_until(lambda: ("bob", "bob-1") in alice.engine.chat_seen)
    assert wait_until(lambda: bob.engine.pending_chats == {})


def test_live_grant_and_failover(live_registry):
    alice = live_registry.peer("alice", create=True)
    assert wait_until(lambda: alice.engine.phase is PeerPhase.LEADING)
    bob = live_registry.peer("bob")
    carol = live_registry.peer("carol")
    assert wait_until(
        lambda: bob.engine.phase is PeerPhase.FOLLOWING
        and carol.engine.phase is PeerPhase.FOLLOWING
    )

    out = bob.command({"action": "request_control"})
    assert out["ok"] is True
    assert wait_until(lambda: "bob" in alice.engine.view(0)["pending_requests"])
    alice.command({"action": "grant", "participant": "bob"})
    assert wait_until(lambda: bob.engine.phase is PeerPhase.LEADING)
    assert bob.engine.epoch == 1
    assert wait_until(
        lambda: alice.engine.leader == "bob" and carol.engine.leader == "bob"
    )

    # now the leader goes dark; the earliest surviving member takes over
    bob.silence()
    assert wait_until(lambda: alice.engine.phase is PeerPhase.LEADING, timeout=8.0)
    assert alice.engine.epoch == 2
    assert wait_until(lambda: carol.engine.leader == "alice" and carol.engine.epoch == 2)
    group = live_registry.registry.to_snapshot()["groups"][0]
    assert group["controller"] == "alice"
    assert sorted(m["participant"] for m in group["members"]) == ["alice", "carol"]


# --------------------------------------------------------- gateway clients


def http_get(port, path="/"):
    with socket.create_connection(("127.0.0.1", port), timeout=3) as s:
        s.sendall(
            ("GET %s HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n" % path).encode()
        )
        buf = b""
        while True:
            chunk = s.recv(65536)
            if not chunk:
                break
            buf += chunk
    head, _, body = buf.partition(b"\r\n\r\n")
    status = int(head.split(b" ", 2)[1])
    return status, body


class WsClient:
    def __init__(self, port):
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=5)
        self.sock.settimeout(5)
        key = base64.b64encode(os.urandom(16)).decode("ascii")
        self.sock.sendall(
            (
                "GET /ws HTTP/1.1\r\nHost: x\r\n"
                "Upgrade: websocket\r\nConnection: Upgrade\r\n"
                "Sec-WebSocket-Key: %s\r\nSec-WebSocket-Version: 13\r\n\r\n" % key
            ).encode("ascii")
        )
        buf = b""
        while b"\r\n\r\n" not in buf:
            buf += self.sock.recv(4096)
        head, _, rest = buf.partition(b"\r\n\r\n")
        assert b" 101 " in head.split(b"\r\n")[0]
        assert ws_accept_key(key).encode("ascii") in head
        self.buf = bytearray(rest)

    def send(self, msg: dict):
        payload = json.dumps(msg).encode("utf-8")
        mask = os.urandom(4)
        masked = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        n = len(payload)
        if n < 126:
            head = struct.pack("!BB", 0x81, 0x80 | n)
        else:
            head = struct.pack("!BBH", 0x81, 0xFE, n)
        self.sock.sendall(head + mask + masked)

    def recv(self) -> dict:
        while True:
            frame = self._parse()
            if frame is not None:
                return json.loads(frame.decode("utf-8"))
            chunk = self.sock.recv(65536)
            if not chunk:
                raise AssertionError("gateway closed the socket")
            self.buf.extend(chunk)

    def recv_until(self, pred, limit=20) -> dict:
        for _ in range(limit):
            msg = self.recv()
            if pred(msg):
                return msg
        raise AssertionError("expected message never arrived")

    def _parse(self):
        buf = self.buf
        if len(buf) < 2:
            return None
        length = buf[1] & 0x7F
        offset = 2
        if length == 126:
            if len(buf) < 4:
                return None
            length = struct.unpack("!H", bytes(buf[2:4]))[0]
            offset = 4
        if len(buf) < offset + length:
            return None
        payload = bytes(buf[offset : offset + length])
        del buf[: offset + length]
        return payload

    def close(self):
        self.sock.close()


def test_gateway_serves_static_and_ws(live_registry, tmp_path):
    (tmp_path / "index.html").write_text("<html>player shell</html>")
    (tmp_path / "app.js").write_text("console.log('shell')")
    alice = live_registry.peer(
        "alice", create=True, with_gateway=True, static_dir=str(tmp_path)
    )
    assert wait_until(lambda: alice.engine.phase is PeerPhase.LEADING)
    port = alice.gateway.port

    status, body = http_get(port, "/")
    assert status == 200 and b"player shell" in body
    status, _ = http_get(port, "/app.js")
    assert status == 200
    status, _ = http_get(port, "/missing.txt")
    assert status == 404
    status, _ = http_get(port, "/../../etc/passwd")
    assert status == 404

    ws = WsClient(port)
    greeting = ws.recv()
    assert greeting["type"] == "ui_state"
    assert greeting["name"] == "alice" and greeting["you_lead"] is True

    ws.send({"action": "slide", "index": 3, "seq": 41})
    push = ws.recv_until(
        lambda m: m["type"] == "ui_state" and m["playback"]["slide_index"] == 3
    )
    assert push["playback"]["version"]["seq"] >= 1
    result = ws.recv_until(lambda m: m["type"] == "cmd_result")
    assert result["seq"] == 41 and result["ok"] is True

    ws.send({"action": "state", "seq": 43})
    result = ws.recv_until(lambda m: m.get("seq") == 43)
    assert result["ok"] is True
    assert result["view"]["playback"]["slide_index"] == 3

    ws.send({"action": "frobnicate", "seq": 42})
    result = ws.recv_until(lambda m: m["type"] == "cmd_result")
    assert result["seq"] == 42 and result["ok"] is False

    ws.close()
