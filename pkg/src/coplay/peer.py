"""Peer session engine.

One engine instance is one participant. It is a single logical event loop
with no I/O of its own: drivers push decoded frames, timer ticks, and user
commands in (each with the current time), and drain outgoing frames from
the endpoint. The deterministic simulator and the live TCP driver run the
exact same code.

Topology is a star around the current leader. Followers send the leader
heartbeats and chat; the leader issues playback events, arbitrates control
requests, sequences chat, and evicts silent followers. When the leader
goes silent for the liveness timeout, followers fail over: the surviving
member who joined earliest claims leadership at the registry (a CAS on the
controller epoch), then re-homes everyone with a transfer announcement and
a fresh snapshot taken from its own last-applied state. In-flight events
and chat sequenced by a crashed leader can be lost; the snapshot is the
authority after a failover.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

from . import eventlog, wire
from .eventlog import EventLog, LogEvent
from .link import Endpoint, LinkConfig
from .model import (
    CoursewareManifest,
    EventKind,
    LeadershipState,
    Outcome,
    PlaybackEvent,
    PlaybackState,
    SessionError,
    StaleEvent,
    OutOfBounds,
    Version,
    apply_event,
    arbitrate,
    decide_failover_leader,
    deny,
    effective_offset,
    grant,
    next_version,
    validate_participant,
)


class NotLeader(SessionError):
    code = "NotLeader"


class AlreadyLeader(SessionError):
    code = "AlreadyLeader"


class NotInSession(SessionError):
    code = "NotInSession"


class LeaderMustTransfer(SessionError):
    code = "LeaderMustTransfer"


class MessageTooLarge(SessionError):
    code = "MessageTooLarge"


class UnknownTarget(SessionError):
    code = "UnknownTarget"


class RequestPending(SessionError):
    code = "RequestPending"


class PeerPhase(str, Enum):
    IDLE = "idle"
    JOINING = "joining"
    FOLLOWING = "following"
    LEADING = "leading"
    FAILING_OVER = "failing_over"
    DEPARTED = "departed"


# Session frame types subject to epoch fencing. Attach and departure
# messages cross epochs by design; everything else from an older epoch is
# stale and dropped.
FENCED_TYPES = frozenset(
    {
        wire.EVENT,
        wire.SYNC_SNAPSHOT,
        wire.HEARTBEAT,
        wire.CONTROL_REQUEST,
        wire.CONTROL_GRANTED,
        wire.CONTROL_DENIED,
        wire.CONTROL_SUPERSEDED,
        wire.CONTROL_TRANSFER,
        wire.CHAT,
    }
)


@dataclass
class PeerConfig:
    name: str
    address: str
    registry: str
    course: Optional[str] = None
    group_id: Optional[str] = None
    create: bool = False
    heartbeat_ms: int = 500
    liveness_timeout_ms: int = 1500
    failover_backoff_ms: int = 750
    retransmit_initial_ms: int = 300
    retransmit_max_ms: int = 2000
    join_timeout_ms: int = 10000
    join_retry_ms: int = 250
    chat_limit_bytes: int = 2048

    def __post_init__(self):
        validate_participant(self.name)


class PeerEngine:
    def __init__(
        self,
        cfg: PeerConfig,
        manifest: CoursewareManifest,
        log: Optional[EventLog] = None,
        trace: Optional[Callable[[str, dict], None]] = None,
        ui: Optional[Callable[[dict], None]] = None,
    ):
        self.cfg = cfg
        self.name = cfg.name
        self.manifest = manifest
        self.manifest_hash = manifest.content_hash()
        self.log = log or EventLog.in_memory()
        self._trace = trace
        self._ui = ui

        self.endpoint = Endpoint(
            cfg.address,
            LinkConfig(cfg.retransmit_initial_ms, cfg.retransmit_max_ms),
        )

        self.phase = PeerPhase.IDLE
        self.group_id: Optional[str] = None
        self.join_seq: Optional[int] = None
        self.leadership: Optional[LeadershipState] = None
        self.leader_addr: Optional[str] = None
        self.roster: List[Tuple[str, int]] = []  # (participant, join_seq)
        self.state = PlaybackState.initial()
        self.anchor = 0
        self.active = True

        # leader-side
        self.followers: Dict[str, str] = {}  # participant -> address
        self.handoff: Optional[dict] = None  # {"target", "epoch"}
        self.chat_seq = 0

        # follower-side
        self.last_heard: Dict[str, int] = {}  # address -> ms
        self.outstanding: Optional[dict] = None  # {"token", "sent_epoch"}
        self.failover: Optional[dict] = None
        self.pending_adopt: Optional[dict] = None  # {"epoch", "via", "leader"}

        self.pending_chats: Dict[str, str] = {}  # temp_id -> text
        self.chat_seen: set = set()  # (sender, temp_id)
        self.want_leave = False
        self.departed_reason: Optional[str] = None

        self._req_counter = 0
        self._request_tokens = 0
        self._chat_counter = 0
        self._rpcs: Dict[int, Tuple[str, Callable]] = {}
        self._deferred: List[dict] = []
        self._hb_next = 0
        self._join_deadline: Optional[int] = None
        self._join_attempt_at: Optional[int] = None
        self._hello_retry_at: Optional[int] = None
        self._grant_logged_epoch: Optional[int] = None
        self.applied_events = 0

    # ------------------------------------------------------------ plumbing

    @property
    def epoch(self) -> int:
        return self.leadership.epoch if self.leadership else 0

    @property
    def leader(self) -> Optional[str]:
        return self.leadership.leader if self.leadership else None

    def trace(self, kind: str, **fields: Any) -> None:
        if self._trace:
            self._trace(kind, fields)

    def _set_phase(self, phase: PeerPhase, now: int) -> None:
        if phase is self.phase:
            return
        self.phase = phase
        self.trace("phase", peer=self.name, phase=phase.value, epoch=self.epoch)
        self._push_ui(now)

    def _log_event(self, now: int, kind: str, actor: str, detail: dict) -> None:
        rec = LogEvent(
            at=now,
            group_id=self.group_id or "",
            actor=actor,
            kind=kind,
            epoch=self.state.version.epoch if kind in eventlog.PLAYBACK_KINDS else self.epoch,
            seq=self.state.version.seq,
            detail=detail,
        )
        self.log.append(rec, now)
        self.trace("log", peer=self.name, record=rec.to_dict())

    def _log_playback(self, now: int, ev: PlaybackEvent, detail: dict) -> None:
        rec = LogEvent(
            at=now,
            group_id=self.group_id or "",
            actor=ev.issuer,
            kind=ev.kind.value,
            epoch=ev.issued_version.epoch,
            seq=ev.issued_version.seq,
            detail=detail,
        )
        self.log.append(rec, now)
        self.trace("log", peer=self.name, record=rec.to_dict())

    def _send(
        self,
        dst: str,
        ftype: str,
        now: int,
        payload: Optional[dict] = None,
        reliable: bool = True,
    ) -> None:
        frame = wire.make_frame(
            ftype,
            self.cfg.address,
            group_id=self.group_id,
            sender=self.name,
            epoch=self.epoch,
            payload=payload,
        )
        self.endpoint.send(dst, frame, now, reliable=reliable)

    def _registry_call(self, op: str, fields: dict, now: int, cb: Callable) -> None:
        self._req_counter += 1
        req_id = self._req_counter
        self._rpcs[req_id] = (op, cb)
        frame = wire.make_frame(
            op, self.cfg.address, sender=self.name, req_id=req_id, **fields
        )
        self.endpoint.send(self.cfg.registry, frame, now, reliable=True)

    def _push_ui(self, now: int) -> None:
        if self._ui:
            self._ui(self.view(now))

    def _ui_error(self, code: str, message: str) -> None:
        if self._ui:
            self._ui({"type": "ui_error", "code": code, "message": message})

    def view(self, now: int) -> dict:
        lead = self.leadership
        return {
            "type": "ui_state",
            "name": self.name,
            "phase": self.phase.value,
            "group_id": self.group_id,
            "leader": lead.leader if lead else None,
            "epoch": self.epoch,
            "you_lead": self.phase is PeerPhase.LEADING,
            "roster": [
                {"participant": p, "join_seq": s, "leads": lead is not None and p == lead.leader}
                for p, s in sorted(self.roster, key=lambda m: m[1])
            ],
            "pending_requests": list(lead.pending_requests) if lead else [],
            "playback": {
                "slide_index": self.state.slide_index,
                "media_offset_ms": self.state.media_offset_ms,
                "playing": self.state.playing,
                "version": {"epoch": self.state.version.epoch, "seq": self.state.version.seq},
                "anchor_time": self.anchor,
                "effective_offset_ms": effective_offset(
                    self.state, self.anchor, now, self.manifest.duration_ms
                ),
            },
            "manifest": {
                "lecture_id": self.manifest.lecture_id,
                "slide_count": self.manifest.slide_count,
                "duration_ms": self.manifest.duration_ms,
            },
            "active": self.active,
            "departed_reason": self.departed_reason,
        }

    # ------------------------------------------------------------- startup

    def start(self, now: int) -> None:
        """Begin the create or join sequence against the registry."""
        self._hb_next = now + self.cfg.heartbeat_ms
        self._set_phase(PeerPhase.JOINING, now)
        self._join_deadline = now + self.cfg.join_timeout_ms
        if self.cfg.create:
            self._registry_call(
                "create_group",
                {
                    "course_id": self.cfg.course,
                    "participant": self.name,
                    "address": self.cfg.address,
                },
                now,
                self._on_created,
            )
        elif self.cfg.group_id:
            self._join(self.cfg.group_id, now)
        else:
            self._find_group(now)

    def _on_created(self, ok: bool, result: dict, now: int) -> None:
        if self.phase is not PeerPhase.JOINING:
            return
        if not ok:
            self._depart(now, result.get("error", "CreateFailed"))
            return
        self._join_deadline = None
        g = result["group"]
        self.group_id = g["group_id"]
        self.join_seq = 0
        self.roster = [(self.name, 0)]
        self.leadership = LeadershipState(self.name, int(g["controller_epoch"]))
        self.anchor = now
        self.active = True
        self._set_phase(PeerPhase.LEADING, now)
        self._log_event(
            now,
            eventlog.JOIN,
            self.name,
            {"state": self.state.to_dict(), "join_seq": 0, "manifest_hash": self.manifest_hash},
        )
        self._push_ui(now)

    def _find_group(self, now: int) -> None:
        self._registry_call(
            "list_active_groups", {"course_id": self.cfg.course}, now, self._on_listing
        )

    def _on_listing(self, ok: bool, result: dict, now: int) -> None:
        if self.phase is not PeerPhase.JOINING:
            return
        groups = result.get("groups", []) if ok else []
        if not groups:
            # nothing to join yet; retry until the join deadline
            self._join_attempt_at = now + self.cfg.join_retry_ms
            return
        self._join(groups[0]["group_id"], now)

    def _join(self, group_id: str, now: int) -> None:
        self._registry_call(
            "join_group",
            {"group_id": group_id, "participant": self.name, "address": self.cfg.address},
            now,
            lambda ok, result, t: self._on_joined(group_id, ok, result, t),
        )

    def _on_joined(self, group_id: str, ok: bool, result: dict, now: int) -> None:
        if self.phase is not PeerPhase.JOINING:
            return
        if not ok:
            self._depart(now, result.get("error", "JoinFailed"))
            return
        self.group_id = group_id
        self.join_seq = int(result["join_seq"])
        leader = result.get("leader")
        if leader is None:
            self._depart(now, "LeaderUnreachable")
            return
        self.leadership = LeadershipState(
            leader["participant"], int(result["controller_epoch"])
        )
        self.leader_addr = leader["address"]
        self.last_heard[self.leader_addr] = now
        self._send_hello(now)

    def _send_hello(self, now: int) -> None:
        """Announce to the leader; repeated while joining because a leader
        that has not finished its own attach silently ignores hellos."""
        self._send(
            self.leader_addr,
            wire.HELLO,
            now,
            payload={"manifest_hash": self.manifest_hash, "join_seq": self.join_seq},
        )
        self._hello_retry_at = now + 3 * self.cfg.heartbeat_ms

    # --------------------------------------------------------------- frames

    def handle_frame(self, src: str, frame: dict, now: int) -> None:
        if self.phase is PeerPhase.IDLE:
            return
        for msg in self.endpoint.receive(src, frame, now):
            self._dispatch(src, msg, now)
        self.endpoint.flush_acks(now)
        self._sweep_deferred(now)
        # any frame from a known address refreshes its liveness, acks included
        self.last_heard[src] = now

    def _dispatch(self, src: str, msg: dict, now: int) -> None:
        ftype = msg.get("type")
        if ftype == wire.REPLY:
            self._on_reply(msg, now)
            return
        if self.phase is PeerPhase.DEPARTED:
            return
        gid = msg.get("group_id")
        if gid is not None and self.group_id is not None and gid != self.group_id:
            return
        epoch = msg.get("epoch")
        if (
            ftype in FENCED_TYPES
            and isinstance(epoch, int)
            and self.leadership is not None
            and epoch < self.epoch
        ):
            return  # stale epoch, discard
        if (
            self.phase is PeerPhase.FAILING_OVER
            and self.failover is not None
            and not self.failover.get("claiming")
            and src == self.leader_addr
            and ftype in FENCED_TYPES
        ):
            # the suspect is alive at the current epoch after all
            self.failover = None
            self._set_phase(PeerPhase.FOLLOWING, now)
        handler = getattr(self, "_on_" + ftype, None)
        if handler is None:
            return  # unknown session type: ignore for forward compatibility
        handler(src, msg, now)

    def _on_reply(self, msg: dict, now: int) -> None:
        entry = self._rpcs.pop(msg.get("req_id"), None)
        if entry is None:
            return
        _op, cb = entry
        if msg.get("ok"):
            cb(True, msg.get("result", {}), now)
        else:
            cb(False, {"error": msg.get("error"), "message": msg.get("message")}, now)

    # -- attach handshake --------------------------------------------------

    def _on_hello(self, src: str, msg: dict, now: int) -> None:
        if self.phase is not PeerPhase.LEADING:
            return  # not leading; joiner will retry against the real leader
        payload = msg.get("payload", {})
        sender = msg.get("sender")
        if payload.get("manifest_hash") != self.manifest_hash:
            self._send(
                src, wire.GOODBYE, now, payload={"reason": "ManifestMismatch"}
            )
            return
        join_seq = int(payload.get("join_seq", -1))
        known = dict(self.roster)
        if sender not in known:
            self.roster.append((sender, join_seq))
            self._log_event(now, eventlog.JOIN, sender, {"join_seq": join_seq})
        self.followers[sender] = src
        self.last_heard[src] = now
        self._broadcast_snapshot(now)
        self._push_ui(now)

    def _on_snapshot_request(self, src: str, msg: dict, now: int) -> None:
        if self.phase is PeerPhase.LEADING:
            self._send_snapshot(src, now)

    def _snapshot_payload(self, now: int) -> dict:
        return {
            "state": self.state.to_dict(),
            "anchor_time": self.anchor,
            "leadership": self.leadership.to_dict(),
            "roster": [[p, s] for p, s in sorted(self.roster, key=lambda m: m[1])],
        }

    def _send_snapshot(self, dst: str, now: int) -> None:
        self._send(dst, wire.SYNC_SNAPSHOT, now, payload=self._snapshot_payload(now))

    def _broadcast_snapshot(self, now: int) -> None:
        for name in sorted(self.followers):
            self._send_snapshot(self.followers[name], now)

    def _on_sync_snapshot(self, src: str, msg: dict, now: int) -> None:
        payload = msg.get("payload", {})
        lead = LeadershipState.from_dict(payload["leadership"])
        if self.leadership is not None and lead.epoch < self.epoch:
            return
        state = PlaybackState.from_dict(payload["state"])
        roster = [(p, int(s)) for p, s in payload.get("roster", [])]
        joining = self.phase is PeerPhase.JOINING
        adopting = self.pending_adopt is not None and lead.epoch >= self.pending_adopt["epoch"]
        state_changed = state != self.state
        self.leadership = LeadershipState(lead.leader, lead.epoch)
        self.leader_addr = src
        self.roster = roster
        self.state = state
        self.anchor = int(payload.get("anchor_time", msg.get("sent_at", now)))
        self.last_heard[src] = now
        if joining:
            self._join_deadline = None
            self._hello_retry_at = None
            self._log_event(
                now,
                eventlog.JOIN,
                self.name,
                {
                    "state": self.state.to_dict(),
                    "join_seq": self.join_seq,
                    "manifest_hash": self.manifest_hash,
                },
            )
            self._set_phase(PeerPhase.FOLLOWING, now)
        elif adopting:
            adopt = self.pending_adopt
            self.pending_adopt = None
            self._log_leadership_change(now, adopt["via"], adopt["leader"], lead.epoch)
            if self.phase is not PeerPhase.FOLLOWING:
                self._set_phase(PeerPhase.FOLLOWING, now)
        elif state_changed:
            # defensive resync: should not happen on an ordered link
            self._log_event(
                now, eventlog.JOIN, self.name, {"state": self.state.to_dict(), "resync": True}
            )
        self._resend_after_rehome(now)
        self._push_ui(now)

    def _log_leadership_change(self, now: int, via: str, leader: str, epoch: int) -> None:
        """Every peer logs the pair (grant-or-claim, transfer) exactly once
        per leadership change it adopts; whoever logged the first half at
        decision or claim time skips re-logging it here."""
        if via == "failover":
            if self._grant_logged_epoch != epoch:
                self._log_event(
                    now,
                    eventlog.FAILOVER_CLAIM,
                    leader,
                    {"leader": leader, "epoch": epoch, "state": self.state.to_dict()},
                )
        else:
            if self._grant_logged_epoch != epoch:
                self._log_event(now, eventlog.CONTROL_GRANT, leader, {"to": leader, "epoch": epoch})
        self._grant_logged_epoch = epoch
        self._log_event(
            now,
            eventlog.CONTROL_TRANSFER,
            leader,
            {"leader": leader, "epoch": epoch, "via": via, "state": self.state.to_dict()},
        )

    # -- playback ----------------------------------------------------------

    def _on_event(self, src: str, msg: dict, now: int) -> None:
        if self.phase not in (PeerPhase.FOLLOWING, PeerPhase.FAILING_OVER):
            return
        ev = PlaybackEvent.from_dict(msg["payload"])
        try:
            new_state = apply_event(self.state, ev, self.manifest)
        except StaleEvent:
            return
        except OutOfBounds:
            self.trace("anomaly", peer=self.name, what="out_of_bounds_event")
            return
        self.state = new_state
        self.anchor = int(msg.get("sent_at", now))
        self.applied_events += 1
        self._log_playback(
            now,
            ev,
            self._playback_detail(ev),
        )
        self._push_ui(now)

    def _playback_detail(self, ev: PlaybackEvent) -> dict:
        detail = {"slide": self.state.slide_index}
        if ev.kind is EventKind.SEEK:
            detail["target_ms"] = ev.target
        elif ev.kind is EventKind.SLIDE_CHANGE:
            detail["target_slide"] = ev.target
        return detail

    def _issue(self, kind: EventKind, target: Optional[int], now: int) -> dict:
        if self.phase is not PeerPhase.LEADING:
            raise NotLeader("only the leader issues playback events")
        version = next_version(self.state.version, self.epoch)
        ev = PlaybackEvent(kind=kind, issuer=self.name, issued_version=version, target=target)
        new_state = apply_event(self.state, ev, self.manifest)  # may raise OutOfBounds
        self.state = new_state
        self.anchor = now
        self.applied_events += 1
        self._log_playback(now, ev, self._playback_detail(ev))
        for name in sorted(self.followers):
            self._send(self.followers[name], wire.EVENT, now, payload=ev.to_dict())
        self._push_ui(now)
        return {"version": {"epoch": version.epoch, "seq": version.seq}}

    # -- control requests ---------------------------------------------------

    def _on_control_request(self, src: str, msg: dict, now: int) -> None:
        if self.phase is not PeerPhase.LEADING:
            return  # requester re-sends once it learns the real leader
        sender = msg.get("sender")
        if sender == self.name:
            return
        before = self.leadership.pending_requests
        self.leadership = self.leadership.with_request(sender)
        if self.leadership.pending_requests != before:
            self._log_event(now, eventlog.CONTROL_REQUEST, sender, {"requester": sender})
            self._push_ui(now)

    def _on_control_granted(self, src: str, msg: dict, now: int) -> None:
        payload = msg.get("payload", {})
        expected = int(payload.get("expected_epoch", self.epoch))
        token = self.outstanding["token"] if self.outstanding else None
        if token is not None:
            self._resolve_request("granted", now)
        self._log_event(
            now, eventlog.CONTROL_GRANT, self.name, {"to": self.name, "epoch": expected + 1}
        )
        self._grant_logged_epoch = expected + 1
        self._registry_call(
            "claim_leadership",
            {"group_id": self.group_id, "claimant": self.name, "expected_epoch": expected},
            now,
            lambda ok, result, t: self._on_claim_reply(ok, result, t, via="grant"),
        )

    def _on_control_denied(self, src: str, msg: dict, now: int) -> None:
        if self.outstanding:
            self._log_event(now, eventlog.CONTROL_DENY, self.name, {"participant": self.name})
            self._resolve_request("denied", now)

    def _on_control_superseded(self, src: str, msg: dict, now: int) -> None:
        if self.outstanding:
            self._log_event(now, eventlog.CONTROL_SUPERSEDE, self.name, {"participant": self.name})
            self._resolve_request("superseded", now)

    def _resolve_request(self, outcome: str, now: int) -> None:
        if not self.outstanding:
            return
        token = self.outstanding["token"]
        self.outstanding = None
        self.trace("request_outcome", peer=self.name, token=token, outcome=outcome)
        if self._ui:
            self._ui({"type": "ui_request_outcome", "outcome": outcome})

    def _on_control_transfer(self, src: str, msg: dict, now: int) -> None:
        payload = msg.get("payload", {})
        new_leader = payload.get("leader")
        new_epoch = int(payload.get("epoch"))
        if self.leadership is not None and new_epoch <= self.epoch:
            return
        if new_leader == self.name:
            # explicit transfer to us without a prior request
            self._on_control_granted(src, {"payload": {"expected_epoch": new_epoch - 1}}, now)
            return
        was_leading = self.phase is PeerPhase.LEADING
        self.leadership = LeadershipState(new_leader, new_epoch)
        self.leader_addr = payload.get("address", src)
        self.pending_adopt = {"epoch": new_epoch, "via": payload.get("via", "grant"), "leader": new_leader}
        self.failover = None
        if was_leading:
            self.followers = {}
            self.handoff = None
        self.last_heard[self.leader_addr] = now
        self._set_phase(PeerPhase.FOLLOWING, now)
        if self.outstanding and self.outstanding["sent_epoch"] < new_epoch:
            if self.pending_adopt["via"] == "grant":
                # a voluntary handoff resolved the race; our request lost,
                # whether or not the old leader's notice reaches us
                self._log_event(
                    now, eventlog.CONTROL_SUPERSEDE, self.name, {"participant": self.name}
                )
                self._resolve_request("superseded", now)
            else:
                # the old leader died before deciding: the request is still
                # live, so roll it forward to the new leader
                self.outstanding["sent_epoch"] = new_epoch
                self._send(
                    self.leader_addr,
                    wire.CONTROL_REQUEST,
                    now,
                    payload={"token": self.outstanding["token"]},
                )
        if self.want_leave:
            self.want_leave = False
            self.leave(now)

    # -- chat ----------------------------------------------------------------

    def _on_chat(self, src: str, msg: dict, now: int) -> None:
        payload = msg.get("payload", {})
        if "chat_seq" in payload:
            self._deliver_chat(payload, now)
            return
        # unsequenced chat arriving at the sequencer
        if self.phase is not PeerPhase.LEADING:
            return
        text = payload.get("text", "")
        if len(text.encode("utf-8")) > self.cfg.chat_limit_bytes:
            return
        self._sequence_chat(msg.get("sender"), text, payload.get("temp_id"), now)

    def _sequence_chat(self, sender: str, text: str, temp_id: Optional[str], now: int) -> None:
        seq = self.chat_seq
        self.chat_seq += 1
        payload = {
            "from": sender,
            "text": text,
            "chat_seq": seq,
            "temp_id": temp_id,
        }
        self._log_event(
            now, eventlog.CHAT, sender, {"text": text, "chat_seq": seq, "epoch": self.epoch}
        )
        for name in sorted(self.followers):
            self._send(self.followers[name], wire.CHAT, now, payload=dict(payload))
        self._deliver_chat(payload, now, log=False)

    def _deliver_chat(self, payload: dict, now: int, log: bool = True) -> None:
        sender = payload.get("from")
        temp_id = payload.get("temp_id")
        key = (sender, temp_id)
        if temp_id is not None:
            if key in self.chat_seen:
                return
            self.chat_seen.add(key)
        if sender == self.name and temp_id is not None:
            self.pending_chats.pop(temp_id, None)
        if log:
            self._log_event(
                now,
                eventlog.CHAT,
                sender,
                {"text": payload.get("text"), "chat_seq": payload.get("chat_seq"), "epoch": self.epoch},
            )
        self.trace(
            "chat_delivered",
            peer=self.name,
            sender=sender,
            chat_seq=payload.get("chat_seq"),
            epoch=self.epoch,
            temp_id=temp_id,
        )
        if self._ui:
            self._ui(
                {
                    "type": "ui_chat",
                    "from": sender,
                    "text": payload.get("text"),
                    "chat_seq": payload.get("chat_seq"),
                    "epoch": self.epoch,
                }
            )

    def _resend_after_rehome(self, now: int) -> None:
        if self.phase is not PeerPhase.FOLLOWING or not self.leader_addr:
            return
        for temp_id in sorted(self.pending_chats):
            self._send(
                self.leader_addr,
                wire.CHAT,
                now,
                payload={"text": self.pending_chats[temp_id], "temp_id": temp_id},
            )

    # -- departures -----------------------------------------------------------

    def _on_goodbye(self, src: str, msg: dict, now: int) -> None:
        reason = msg.get("payload", {}).get("reason")
        sender = msg.get("sender")
        if self.phase is PeerPhase.JOINING and reason:
            # attach rejected; roll back the registry join
            self._registry_call(
                "leave_group",
                {"group_id": self.group_id, "participant": self.name},
                now,
                lambda ok, result, t: None,
            )
            self._depart(now, reason)
            return
        if self.phase is PeerPhase.LEADING and sender in self.followers:
            self._remove_follower(sender, now, abrupt=False)

    def _remove_follower(self, name: str, now: int, abrupt: bool) -> None:
        addr = self.followers.pop(name, None)
        if addr:
            self.endpoint.drop_link(addr)
        self.roster = [(p, s) for p, s in self.roster if p != name]
        if self.leadership:
            self.leadership = self.leadership.without_request(name)
        if self.handoff and self.handoff["target"] == name:
            self.handoff = None  # transfer target vanished; stay leader
        self._log_event(now, eventlog.LEAVE, name, {"abrupt": abrupt})
        if abrupt:
            def evicted(ok: bool, result: dict, t: int) -> None:
                if not ok and result.get("error") in ("NotController", "StaleRemoval"):
                    # the registry knows a newer controller; find out who
                    self._registry_call(
                        "get_group",
                        {"group_id": self.group_id},
                        t,
                        self._adopt_registry_controller,
                    )
            self._registry_call(
                "leave_group",
                {
                    "group_id": self.group_id,
                    "participant": name,
                    "by": self.name,
                    "epoch": self.epoch,
                },
                now,
                evicted,
            )
        self._broadcast_snapshot(now)
        self._push_ui(now)

    def _depart(self, now: int, reason: Optional[str] = None) -> None:
        self.departed_reason = reason
        self.failover = None
        self.outstanding = None
        self._hello_retry_at = None
        self._join_attempt_at = None
        self._set_phase(PeerPhase.DEPARTED, now)
        if reason:
            self._ui_error(reason, "departed: %s" % reason)

    # ------------------------------------------------------------- commands

    def handle_command(self, cmd: dict, now: int) -> dict:
        """Entry point for the gateway, headless scripts, and the CLI."""
        action = cmd.get("action")
        try:
            out = self._command(action, cmd, now)
        except SessionError as e:
            self.trace("cmd_error", peer=self.name, action=action, error=e.code)
            self._ui_error(e.code, str(e))
            return {"ok": False, "error": e.code, "message": str(e)}
        result = {"ok": True}
        if out:
            result.update(out)
        return result

    def _command(self, action: str, cmd: dict, now: int) -> Optional[dict]:
        if action == "state":
            return {"view": self.view(now)}
        if self.phase is PeerPhase.DEPARTED:
            raise NotInSession("session over")
        if action == "play":
            if self.phase is PeerPhase.LEADING and self.state.playing:
                return None
            return self._issue(EventKind.PLAY, None, now)
        if action == "pause":
            if self.phase is not PeerPhase.LEADING:
                raise NotLeader("only the leader issues playback events")
            if not self.state.playing:
                return None
            # freeze the timeline where the audience actually is: materialize
            # the effective offset, then pause
            pos = effective_offset(self.state, self.anchor, now, self.manifest.duration_ms)
            if pos != self.state.media_offset_ms:
                self._issue(EventKind.SEEK, pos, now)
            return self._issue(EventKind.PAUSE, None, now)
        if action == "seek":
            return self._issue(EventKind.SEEK, int(cmd["ms"]), now)
        if action == "slide":
            return self._issue(EventKind.SLIDE_CHANGE, int(cmd["index"]), now)
        if action == "request_control":
            return self._request_control(now)
        if action == "grant":
            return self._decide(cmd.get("participant", "*"), "grant", now)
        if action == "deny":
            return self._decide(cmd.get("participant", "*"), "deny", now)
        if action == "transfer":
            return self._transfer(cmd["participant"], now)
        if action == "chat":
            return self._chat(cmd.get("text", ""), now)
        if action == "set_active":
            return self._set_active(bool(cmd.get("active")), now)
        if action == "leave":
            return self.leave(now)
        raise SessionError("unknown action %r" % action)

    def _request_control(self, now: int) -> dict:
        if self.phase is PeerPhase.LEADING:
            raise AlreadyLeader("already leading")
        if self.phase not in (PeerPhase.FOLLOWING, PeerPhase.FAILING_OVER):
            raise NotInSession("not attached to a session")
        if self.outstanding:
            raise RequestPending("a control request is already outstanding")
        self._request_tokens += 1
        token = "%s#%d" % (self.name, self._request_tokens)
        self.outstanding = {"token": token, "sent_epoch": self.epoch}
        self.trace("request_open", peer=self.name, token=token)
        if self.leader_addr and self.phase is PeerPhase.FOLLOWING:
            self._send(self.leader_addr, wire.CONTROL_REQUEST, now, payload={"token": token})
        return {"token": token}

    def _decide(self, participant: str, kind: str, now: int) -> dict:
        if self.phase is not PeerPhase.LEADING:
            raise NotLeader("only the leader arbitrates")
        pending = self.leadership.pending_requests
        if participant == "*":
            if not pending:
                self._deferred.append({"action": kind, "participant": "*", "at": now})
                return {"deferred": True}
            participant = pending[0]
        if participant not in pending:
            self._deferred.append({"action": kind, "participant": participant, "at": now})
            return {"deferred": True}
        if self.handoff:
            raise RequestPending("a leadership handoff is already in flight")
        decision = grant(participant) if kind == "grant" else deny(participant)
        new_lead, outcomes = arbitrate(self.leadership, decision)
        if kind == "grant":
            # stay leader until the grantee's claim commits; pending set is
            # resolved now so every requester gets exactly one outcome
            self.leadership = LeadershipState(self.name, self.epoch)
            self.handoff = {"target": participant, "epoch": self.epoch + 1}
        else:
            self.leadership = new_lead
        for outcome in outcomes:
            self._send_outcome(outcome, now)
        self._push_ui(now)
        return {"outcomes": [[o.kind, o.participant] for o in outcomes]}

    def _send_outcome(self, outcome, now: int) -> None:
        addr = self.followers.get(outcome.participant)
        if outcome.kind == "granted":
            self._log_event(
                now,
                eventlog.CONTROL_GRANT,
                self.name,
                {"to": outcome.participant, "epoch": self.epoch + 1},
            )
            self._grant_logged_epoch = self.epoch + 1
            if addr:
                self._send(
                    addr,
                    wire.CONTROL_GRANTED,
                    now,
                    payload={"expected_epoch": self.epoch},
                )
        elif outcome.kind == "denied":
            self._log_event(
                now, eventlog.CONTROL_DENY, self.name, {"participant": outcome.participant}
            )
            if addr:
                self._send(addr, wire.CONTROL_DENIED, now, payload={})
        else:
            self._log_event(
                now, eventlog.CONTROL_SUPERSEDE, self.name, {"participant": outcome.participant}
            )
            if addr:
                self._send(addr, wire.CONTROL_SUPERSEDED, now, payload={})

    def _transfer(self, participant: str, now: int) -> dict:
        if self.phase is not PeerPhase.LEADING:
            raise NotLeader("only the leader transfers control")
        if participant == self.name or participant not in dict(self.roster):
            raise UnknownTarget("no member %r to transfer to" % participant)
        if self.handoff:
            raise RequestPending("a leadership handoff is already in flight")
        # same commit path as a grant: supersede whatever was pending,
        # hand the target a grant, let its registry claim seal the epoch
        for p in self.leadership.pending_requests:
            self._send_outcome(Outcome("superseded", p), now)
        self.leadership = LeadershipState(self.name, self.epoch)
        self.handoff = {"target": participant, "epoch": self.epoch + 1}
        self._log_event(
            now, eventlog.CONTROL_GRANT, self.name, {"to": participant, "epoch": self.epoch + 1}
        )
        self._grant_logged_epoch = self.epoch + 1
        addr = self.followers.get(participant)
        if addr:
            self._send(addr, wire.CONTROL_GRANTED, now, payload={"expected_epoch": self.epoch})
        return {"target": participant}

    def _chat(self, text: str, now: int) -> dict:
        if len(text.encode("utf-8")) > self.cfg.chat_limit_bytes:
            raise MessageTooLarge(
                "chat body exceeds %d bytes" % self.cfg.chat_limit_bytes
            )
        if self.phase not in (PeerPhase.LEADING, PeerPhase.FOLLOWING, PeerPhase.FAILING_OVER):
            raise NotInSession("not attached to a session")
        self._chat_counter += 1
        temp_id = "%s-%d" % (self.name, self._chat_counter)
        if self.phase is PeerPhase.LEADING:
            self._sequence_chat(self.name, text, temp_id, now)
            return {"temp_id": temp_id}
        self.pending_chats[temp_id] = text
        if self.phase is PeerPhase.FOLLOWING and self.leader_addr:
            self._send(
                self.leader_addr, wire.CHAT, now, payload={"text": text, "temp_id": temp_id}
            )
        # while failing over the message stays queued; re-homing re-sends it
        return {"temp_id": temp_id, "queued": self.phase is not PeerPhase.FOLLOWING}

    def _set_active(self, active: bool, now: int) -> dict:
        if self.phase is not PeerPhase.LEADING:
            raise NotLeader("only the leader toggles the group")
        def done(ok: bool, result: dict, t: int) -> None:
            if ok:
                self.active = bool(result.get("active"))
                self._log_event(now, eventlog.ACTIVE_TOGGLE, self.name, {"active": self.active})
                self._push_ui(t)
            else:
                self._ui_error(result.get("error", "SetActiveFailed"), str(result))
        self._registry_call(
            "set_active",
            {"group_id": self.group_id, "active": active, "by": self.name},
            now,
            done,
        )
        return {"requested": active}

    def leave(self, now: int) -> dict:
        if self.phase is PeerPhase.LEADING:
            if self.handoff:
                self.want_leave = True
                return {"deferred": True}
            if self.followers:
                raise LeaderMustTransfer("transfer control before leaving")
            self._registry_call(
                "leave_group",
                {"group_id": self.group_id, "participant": self.name},
                now,
                lambda ok, result, t: None,
            )
            self._log_event(now, eventlog.LEAVE, self.name, {"abrupt": False})
            self._depart(now)
            return {}
        if self.phase in (PeerPhase.FOLLOWING, PeerPhase.FAILING_OVER):
            if self.leader_addr:
                self._send(self.leader_addr, wire.GOODBYE, now, payload={"reason": "leave"})
            self._registry_call(
                "leave_group",
                {"group_id": self.group_id, "participant": self.name},
                now,
                lambda ok, result, t: None,
            )
            self._log_event(now, eventlog.LEAVE, self.name, {"abrupt": False})
            self._depart(now)
            return {}
        if self.phase is PeerPhase.JOINING:
            self._depart(now)
            return {}
        raise NotInSession("nothing to leave")

    def _sweep_deferred(self, now: int) -> None:
        if not self._deferred or self.phase is not PeerPhase.LEADING or self.handoff:
            return
        pending = self.leadership.pending_requests
        rest: List[dict] = []
        for item in self._deferred:
            target = item["participant"]
            if target == "*" and pending:
                target = pending[0]
            if target != "*" and target in pending and not self.handoff:
                self._decide(target, item["action"], now)
                pending = self.leadership.pending_requests
            else:
                rest.append(item)
        self._deferred = rest

    # --------------------------------------------------------------- timers

    def next_wakeup(self) -> Optional[int]:
        if self.phase is PeerPhase.IDLE:
            return None
        due = [self._hb_next]
        w = self.endpoint.next_wakeup()
        if w is not None:
            due.append(w)
        if self._join_deadline is not None:
            due.append(self._join_deadline)
        if self._join_attempt_at is not None:
            due.append(self._join_attempt_at)
        if self._hello_retry_at is not None:
            due.append(self._hello_retry_at)
        if self.failover and not self.failover.get("claiming"):
            due.append(self.failover["await_until"])
        return min(due)

    def on_timer(self, now: int) -> None:
        if self.phase is PeerPhase.IDLE:
            return
        self.endpoint.on_timer(now)
        if self._join_attempt_at is not None and now >= self._join_attempt_at:
            self._join_attempt_at = None
            if self.phase is PeerPhase.JOINING:
                self._find_group(now)
        if self._hello_retry_at is not None and now >= self._hello_retry_at:
            self._hello_retry_at = None
            if self.phase is PeerPhase.JOINING and self.leader_addr:
                self._send_hello(now)
        if (
            self._join_deadline is not None
            and now >= self._join_deadline
            and self.phase is PeerPhase.JOINING
        ):
            self._join_deadline = None
            if self.group_id:
                self._registry_call(
                    "leave_group",
                    {"group_id": self.group_id, "participant": self.name},
                    now,
                    lambda ok, result, t: None,
                )
            self._depart(now, "LeaderUnreachable")
        if now >= self._hb_next:
            self._hb_next = now + self.cfg.heartbeat_ms
            self._heartbeat(now)
        if self.failover and not self.failover.get("claiming"):
            if now >= self.failover["await_until"]:
                self._failover_recheck(now)
        self._sweep_deferred(now)

    def _heartbeat(self, now: int) -> None:
        T = self.cfg.liveness_timeout_ms
        # heartbeats ride the reliable channel: raw arrival of any frame,
        # retransmit copies included, refreshes liveness, so a false death
        # verdict needs T of silence across originals and retries alike
        if self.phase is PeerPhase.LEADING:
            for name in sorted(self.followers):
                self._send(self.followers[name], wire.HEARTBEAT, now)
            for name in sorted(self.followers):
                addr = self.followers[name]
                if now - self.last_heard.get(addr, now) >= T:
                    self._remove_follower(name, now, abrupt=True)
        elif self.phase is PeerPhase.FOLLOWING and self.leader_addr:
            self._send(self.leader_addr, wire.HEARTBEAT, now)
            if now - self.last_heard.get(self.leader_addr, now) >= T:
                self._begin_failover(now)

    # -------------------------------------------------------------- failover

    def _begin_failover(self, now: int) -> None:
        self.failover = {
            "suspected": [self.leadership.leader],
            "await_until": now + self.cfg.failover_backoff_ms,
            "claiming": False,
            "old_leader": self.leadership.leader,
        }
        self._set_phase(PeerPhase.FAILING_OVER, now)
        self._failover_decide(now)

    def _failover_decide(self, now: int) -> None:
        fo = self.failover
        if fo is None:
            return
        suspected = set(fo["suspected"])
        candidates = [(p, s) for p, s in self.roster if p not in suspected or p == fo["old_leader"]]
        try:
            designee = decide_failover_leader(candidates, fo["old_leader"])
        except SessionError:
            # nobody left but us is also possible when the roster is stale;
            # reset suspicion and wait another round
            fo["suspected"] = [fo["old_leader"]]
            fo["await_until"] = now + self.cfg.failover_backoff_ms
            return
        if designee == self.name:
            fo["claiming"] = True
            self.trace("failover_claiming", peer=self.name, epoch=self.epoch)
            self._registry_call(
                "claim_leadership",
                {"group_id": self.group_id, "claimant": self.name, "expected_epoch": self.epoch},
                now,
                lambda ok, result, t: self._on_claim_reply(ok, result, t, via="failover"),
            )
        else:
            fo["designee"] = designee
            fo["await_until"] = now + self.cfg.failover_backoff_ms

    def _failover_recheck(self, now: int) -> None:
        fo = self.failover
        designee = fo.get("designee")
        if designee and designee not in fo["suspected"]:
            fo["suspected"].append(designee)
        fo["await_until"] = now + self.cfg.failover_backoff_ms

        def refreshed(ok: bool, result: dict, t: int) -> None:
            if self.failover is not fo or self.phase is not PeerPhase.FAILING_OVER:
                return
            if not ok:
                if result.get("error") in ("UnknownGroup", "NotAMember"):
                    self._depart(t, result.get("error"))
                return
            if int(result["controller_epoch"]) > self.epoch:
                # someone already won; their transfer is on its way
                fo["await_until"] = t + self.cfg.failover_backoff_ms
                return
            self.roster = [
                (m["participant"], int(m["join_seq"])) for m in result["members"]
            ]
            self._failover_decide(t)

        self._registry_call("get_members", {"group_id": self.group_id}, now, refreshed)

    def _on_claim_reply(self, ok: bool, result: dict, now: int, via: str) -> None:
        if self.phase is PeerPhase.DEPARTED:
            return
        if ok:
            new_epoch = int(result["epoch"])
            members = result.get("members", [])
            self._become_leader(new_epoch, members, via, now)
            return
        error = result.get("error")
        if error == "EpochConflict":
            if self.failover:
                self.failover["claiming"] = False
                self.failover["await_until"] = now + self.cfg.failover_backoff_ms
            self._registry_call(
                "get_group", {"group_id": self.group_id}, now, self._adopt_registry_controller
            )
        elif error in ("NotAMember", "UnknownGroup"):
            self._depart(now, error)
        # other errors: stay put; liveness machinery will try again

    def _adopt_registry_controller(self, ok: bool, result: dict, now: int) -> None:
        if not ok or self.phase is PeerPhase.DEPARTED:
            return
        g = result["group"]
        controller = g["controller"]
        epoch = int(g["controller_epoch"])
        if epoch <= self.epoch or controller == self.name:
            return
        if not any(m["participant"] == self.name for m in g["members"]):
            self._depart(now, "Evicted")
            return
        entry = next((m for m in g["members"] if m["participant"] == controller), None)
        if entry is None:
            return
        self.leadership = LeadershipState(controller, epoch)
        self.leader_addr = entry["address"]
        self.last_heard[self.leader_addr] = now
        self.failover = None
        self.followers = {}
        self.handoff = None
        self._set_phase(PeerPhase.FOLLOWING, now)
        # announce ourselves so the winner tracks and snapshots us
        self._send(
            self.leader_addr,
            wire.HELLO,
            now,
            payload={"manifest_hash": self.manifest_hash, "join_seq": self.join_seq},
        )
        # we only land here after losing a failover race, so an unresolved
        # request is still live at the new leader
        if self.outstanding and self.outstanding["sent_epoch"] < epoch:
            self.outstanding["sent_epoch"] = epoch
            self._send(
                self.leader_addr,
                wire.CONTROL_REQUEST,
                now,
                payload={"token": self.outstanding["token"]},
            )

    def _become_leader(self, new_epoch: int, members: List[dict], via: str, now: int) -> None:
        old_leader = self.failover["old_leader"] if self.failover else self.leader
        self.failover = None
        self.pending_adopt = None
        self.leadership = LeadershipState(self.name, new_epoch)
        self.leader_addr = None
        self.handoff = None
        self.chat_seq = 0
        roster = []
        followers: Dict[str, str] = {}
        for m in members:
            p, s, addr = m["participant"], int(m["join_seq"]), m["address"]
            if p == old_leader and via == "failover":
                continue
            roster.append((p, s))
            if p != self.name:
                followers[p] = addr
                self.last_heard.setdefault(addr, now)
        if roster:
            self.roster = roster
            self.followers = followers
        if via == "failover":
            if self._grant_logged_epoch != new_epoch:
                self._log_event(
                    now,
                    eventlog.FAILOVER_CLAIM,
                    self.name,
                    {"leader": self.name, "epoch": new_epoch, "state": self.state.to_dict()},
                )
                self._grant_logged_epoch = new_epoch
            if old_leader:
                self._registry_call(
                    "leave_group",
                    {
                        "group_id": self.group_id,
                        "participant": old_leader,
                        "by": self.name,
                        "epoch": new_epoch,
                    },
                    now,
                    lambda ok, result, t: None,
                )
        self._log_event(
            now,
            eventlog.CONTROL_TRANSFER,
            self.name,
            {"leader": self.name, "epoch": new_epoch, "via": via, "state": self.state.to_dict()},
        )
        self._set_phase(PeerPhase.LEADING, now)
        if self.outstanding:
            self._resolve_request("granted", now)
        for name in sorted(self.followers):
            addr = self.followers[name]
            self._send(
                addr,
                wire.CONTROL_TRANSFER,
                now,
                payload={
                    "leader": self.name,
                    "epoch": new_epoch,
                    "via": via,
                    "address": self.cfg.address,
                },
            )
            self._send_snapshot(addr, now)
        self._push_ui(now)
