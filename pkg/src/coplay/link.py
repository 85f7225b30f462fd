"""Per-connection delivery bookkeeping.

Frames between two addresses ride a lightweight channel: every frame gets a
monotone per-connection `seq`; frames that must arrive get a `rel` index,
are buffered by the sender, and are retransmitted with exponential backoff
until the receiver's cumulative `ack` covers them. Receivers deliver `rel`
frames exactly once, in order. Heartbeats and acks themselves are sent
unreliably; losing one is harmless.

Over TCP this machinery is quiet (acks return promptly, nothing times
out); over the simulated lossy transport it is what makes delivery
reliable and ordered.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional, Tuple

from . import wire


class LinkConfig:
    def __init__(
        self,
        retransmit_initial_ms: int = 300,
        retransmit_max_ms: int = 2000,
        max_attempts: int = 40,
        reorder_window: int = 512,
    ):
        self.retransmit_initial_ms = retransmit_initial_ms
        self.retransmit_max_ms = retransmit_max_ms
        self.max_attempts = max_attempts
        self.reorder_window = reorder_window


class Link:
    """State for one remote address."""

    def __init__(self, cfg: LinkConfig):
        self.cfg = cfg
        self.tx_seq = 0
        self.tx_rel = 0
        self.unacked: Dict[int, list] = {}  # rel -> [frame, due_ms, interval_ms, attempts]
        self.rx_expected = 1
        self.rx_buffer: Dict[int, Dict[str, Any]] = {}
        self.ack_pending = False

    # -- send side -------------------------------------------------------

    def stamp(self, frame: Dict[str, Any], reliable: bool, now_ms: int) -> Dict[str, Any]:
        self.tx_seq += 1
        frame["seq"] = self.tx_seq
        frame["ack"] = self.rx_expected - 1
        self.ack_pending = False
        if reliable:
            self.tx_rel += 1
            frame["rel"] = self.tx_rel
            self.unacked[self.tx_rel] = [
                frame,
                now_ms + self.cfg.retransmit_initial_ms,
                self.cfg.retransmit_initial_ms,
                0,
            ]
        return frame

    def on_ack(self, ack: int) -> None:
        for rel in [r for r in self.unacked if r <= ack]:
            del self.unacked[rel]

    def due_retransmits(self, now_ms: int) -> List[Dict[str, Any]]:
        out = []
        for rel in sorted(self.unacked):
            entry = self.unacked[rel]
            frame, due, interval, attempts = entry
            if due > now_ms:
                continue
            if attempts >= self.cfg.max_attempts:
                # Give up quietly; liveness detection handles dead peers.
                del self.unacked[rel]
                continue
            interval = min(interval * 2, self.cfg.retransmit_max_ms)
            entry[1] = now_ms + interval
            entry[2] = interval
            entry[3] = attempts + 1
            frame = dict(frame)
            frame["ack"] = self.rx_expected - 1
            out.append(frame)
        return out

    def next_wakeup(self) -> Optional[int]:
        if not self.unacked:
            return None
        return min(entry[1] for entry in self.unacked.values())

    # -- receive side ----------------------------------------------------

    def accept(self, frame: Dict[str, Any]) -> List[Dict[str, Any]]:
        """Run link bookkeeping for an incoming frame; return the session
        frames that become deliverable, in order."""
        ack = frame.get("ack")
        if isinstance(ack, int):
            self.on_ack(ack)
        if frame.get("type") == wire.ACK:
            return []
        rel = frame.get("rel")
        if rel is None:
            return [frame]
        self.ack_pending = True
        if rel < self.rx_expected:
            return []  # duplicate
        if rel > self.rx_expected:
            if len(self.rx_buffer) < self.cfg.reorder_window:
                self.rx_buffer[rel] = frame
            return []
        out = [frame]
        self.rx_expected += 1
        while self.rx_expected in self.rx_buffer:
            out.append(self.rx_buffer.pop(self.rx_expected))
            self.rx_expected += 1
        return out


class Endpoint:
    """All links for one node plus its outgoing frame queue.

    Engines call send()/receive()/on_timer() and drivers drain `outbox`,
    encode each frame, and put it on the transport.
    """

    def __init__(self, address: str, cfg: Optional[LinkConfig] = None):
        self.address = address
        self.cfg = cfg or LinkConfig()
        self.links: Dict[str, Link] = {}
        self.outbox: List[Tuple[str, Dict[str, Any]]] = []

    def link_to(self, dst: str) -> Link:
        link = self.links.get(dst)
        if link is None:
            link = Link(self.cfg)
            self.links[dst] = link
        return link

    def send(
        self, dst: str, frame: Dict[str, Any], now_ms: int, reliable: bool = True
    ) -> None:
        frame["sent_at"] = now_ms
        self.link_to(dst).stamp(frame, reliable, now_ms)
        self.outbox.append((dst, frame))

    def receive(self, src: str, frame: Dict[str, Any], now_ms: int) -> List[Dict[str, Any]]:
        return self.link_to(src).accept(frame)

    def flush_acks(self, now_ms: int) -> None:
        """Emit standalone acks for links that owe one and got no piggyback."""
        for dst in list(self.links):
            link = self.links[dst]
            if link.ack_pending:
                self.send(dst, wire.make_frame(wire.ACK, self.address), now_ms, reliable=False)

    def on_timer(self, now_ms: int) -> None:
        for dst in list(self.links):
            for frame in self.links[dst].due_retransmits(now_ms):
                self.outbox.append((dst, frame))

    def next_wakeup(self) -> Optional[int]:
        due = [w for link in self.links.values() if (w := link.next_wakeup()) is not None]
        return min(due) if due else None

    def drop_link(self, dst: str) -> None:
        self.links.pop(dst, None)

    def drain(self) -> List[Tuple[str, Dict[str, Any]]]:
        out = self.outbox
        self.outbox = []
        return out
