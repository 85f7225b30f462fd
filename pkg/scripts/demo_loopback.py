"""Run a complete live session on loopback TCP and narrate it.

Starts a registry and a few peers in one process (each node on its own
event-loop thread), drives a short lecture through play, slide changes,
chat, a leadership handoff, and a simulated leader crash with failover,
then replays one peer's event log to show it reproduces the final state.

    python scripts/demo_loopback.py
    python scripts/demo_loopback.py --peers 5 --keep-logs /tmp/demo-logs
"""

import argparse
import json
import random
import shutil
import sys
import tempfile
import threading
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from coplay.eventlog import EventLog, read_log, replay
from coplay.model import CoursewareManifest
from coplay.net import TcpDriver, listen_socket
from coplay.peer import PeerConfig, PeerEngine, PeerPhase
from coplay.registry import Registry
from coplay.registry_node import RegistryNode

NAMES = ["ada", "grace", "edsger", "barbara", "leslie", "tony", "radia", "lynn"]

# Snappy timers so the demo finishes in seconds; the defaults are tuned
# for humans on real networks, not for a loopback demo.
TIMERS = dict(
    heartbeat_ms=120,
    liveness_timeout_ms=400,
    failover_backoff_ms=180,
    retransmit_initial_ms=60,
    retransmit_max_ms=240,
)


def wait_until(pred, timeout=8.0, step=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return False


class Node:
    """One engine plus its socket loop on a daemon thread."""

    def __init__(self, name, manifest, registry_addr, create, log_dir):
        listener = listen_socket("127.0.0.1:0")
        self.name = name
        self.address = "127.0.0.1:%d" % listener.getsockname()[1]
        self.log = EventLog.open(log_dir, name, int(time.time() * 1000))
        cfg = PeerConfig(
            name=name,
            address=self.address,
            registry=registry_addr,
            course=manifest.course_id,
            create=create,
            **TIMERS,
        )
        self.engine = PeerEngine(cfg, manifest, log=self.log)
        self.driver = TcpDriver(
            self.address,
            self.engine.handle_frame,
            self.engine.on_timer,
            self.engine.next_wakeup,
            self.engine.endpoint.drain,
            listener=listener,
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
        if not done.wait(3.0):
            raise RuntimeError("%s: loop did not process %r" % (self.name, cmd))
        return out

    def view(self):
        return self.command({"action": "state"})["view"]

    def crash(self):
        self.driver.stop()
        self.thread.join(3.0)

    def stop(self):
        try:
            self.command({"action": "leave"})
        except RuntimeError:
            pass
        time.sleep(0.3)
        self.driver.stop()
        self.thread.join(3.0)
        self.driver.close()
        self.log.close()


def say(msg):
    print(msg, flush=True)


def roster_line(view):
    pb = view["playback"]
    return "leader=%s epoch=%d slide=%d offset=%dms playing=%s" % (
        view["leader"],
        view["epoch"],
        pb["slide_index"],
        pb["effective_offset_ms"],
        pb["playing"],
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--peers", type=int, default=3, help="participants (2..8)")
    ap.add_argument(
        "--manifest",
        default=str(Path(__file__).resolve().parent.parent / "manifests" / "dist-sys-101.json"),
    )
    ap.add_argument("--keep-logs", help="write session logs here instead of a temp dir")
    args = ap.parse_args()

    n = max(2, min(args.peers, len(NAMES)))
    manifest = CoursewareManifest.from_dict(json.load(open(args.manifest)))
    log_dir = args.keep_logs or tempfile.mkdtemp(prefix="coplay-demo-")

    reg_listener = listen_socket("127.0.0.1:0")
    reg_addr = "127.0.0.1:%d" % reg_listener.getsockname()[1]
    registry = Registry([manifest.course_id], randbits=random.Random().getrandbits)
    node = RegistryNode(registry, reg_addr)
    reg_driver = TcpDriver(
        reg_addr, node.handle_frame, node.on_timer, node.next_wakeup, node.drain,
        listener=reg_listener,
    )
    threading.Thread(target=reg_driver.run, daemon=True).start()
    say("registry on %s, logs in %s" % (reg_addr, log_dir))

    peers = [
        Node(NAMES[i], manifest, reg_addr, create=(i == 0), log_dir=log_dir).start()
        for i in range(n)
    ]
    leader, second = peers[0], peers[1]

    ok = wait_until(
        lambda: leader.engine.phase is PeerPhase.LEADING
        and all(p.engine.phase is PeerPhase.FOLLOWING for p in peers[1:])
    )
    if not ok:
        say("session never formed")
        return 1
    say("session formed: %s leads %d followers" % (leader.name, n - 1))

    leader.command({"action": "play"})
    leader.command({"action": "slide", "index": 2})
    second.command({"action": "chat", "text": "slide 2 already?"})
    time.sleep(0.4)
    say("after play + slide 2:")
    for p in peers:
        say("  %-8s %s" % (p.name, roster_line(p.view())))

    say("%s hands leadership to %s" % (leader.name, second.name))
    leader.command({"action": "transfer", "participant": second.name})
    wait_until(lambda: second.engine.phase is PeerPhase.LEADING)
    second.command({"action": "slide", "index": 3})
    time.sleep(0.4)
    for p in peers:
        say("  %-8s %s" % (p.name, roster_line(p.view())))

    say("%s crashes; survivors elect a replacement" % second.name)
    second.crash()
    survivors = [p for p in peers if p is not second]
    ok = wait_until(
        lambda: any(p.engine.phase is PeerPhase.LEADING for p in survivors), timeout=10.0
    )
    if not ok:
        say("failover never completed")
        return 1
    new_leader = next(p for p in survivors if p.engine.phase is PeerPhase.LEADING)
    say("%s took over at epoch %d" % (new_leader.name, new_leader.engine.epoch))
    new_leader.command({"action": "pause"})
    time.sleep(0.3)
    for p in survivors:
        say("  %-8s %s" % (p.name, roster_line(p.view())))

    pb = new_leader.view()["playback"]
    final = {
        "slide_index": pb["slide_index"],
        "media_offset_ms": pb["media_offset_ms"],
        "playing": pb["playing"],
        "version": pb["version"],
    }
    for p in survivors:
        p.stop()
    reg_driver.stop()
    reg_driver.close()

    log_path = sorted(Path(log_dir).glob("%s-*.log" % new_leader.name))[-1]
    outcome = replay(read_log(str(log_path)), manifest)
    say("replay of %s:" % log_path.name)
    say("  terminal state %s" % outcome.state.to_dict())
    say("  live state     %s" % final)
    matches = outcome.state.to_dict() == final
    say("  match: %s" % matches)

    if not args.keep_logs:
        shutil.rmtree(log_dir, ignore_errors=True)
    return 0 if matches else 1


if __name__ == "__main__":
    sys.exit(main())
