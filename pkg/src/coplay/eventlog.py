"""Append-only session event log, its replay, and usage summaries.

Each peer (and the registry) writes one checksummed line-delimited log per
(group, activation); see docs/log-format.md. Replay re-applies the playback
records through the same pure state machine the live session used, so a
log is sufficient to reproduce the terminal playback state exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .model import (
    CoursewareManifest,
    EventKind,
    PlaybackEvent,
    PlaybackState,
    SessionError,
    StaleEvent,
    Version,
    apply_event,
)
from .records import (
    CorruptRecord,
    MemoryRecordLog,
    RecordWriter,
    StorageFull,
    read_record_file,
)

# Record kinds, in the shape they appear on disk.
JOIN = "join"
LEAVE = "leave"
PLAY = "play"
PAUSE = "pause"
SEEK = "seek"
SLIDE_CHANGE = "slide_change"
CONTROL_REQUEST = "control_request"
CONTROL_GRANT = "control_grant"
CONTROL_DENY = "control_deny"
CONTROL_SUPERSEDE = "control_supersede"
CONTROL_TRANSFER = "control_transfer"
FAILOVER_CLAIM = "failover_claim"
CHAT = "chat"
ACTIVE_TOGGLE = "active_toggle"

LOG_KINDS = frozenset(
    {
        JOIN,
        LEAVE,
        PLAY,
        PAUSE,
        SEEK,
        SLIDE_CHANGE,
        CONTROL_REQUEST,
        CONTROL_GRANT,
        CONTROL_DENY,
        CONTROL_SUPERSEDE,
        CONTROL_TRANSFER,
        FAILOVER_CLAIM,
        CHAT,
        ACTIVE_TOGGLE,
    }
)

PLAYBACK_KINDS = {PLAY: EventKind.PLAY, PAUSE: EventKind.PAUSE,
                  SEEK: EventKind.SEEK, SLIDE_CHANGE: EventKind.SLIDE_CHANGE}


class GapDetected(SessionError):
    code = "GapDetected"


class BadLogRecord(SessionError):
    code = "BadLogRecord"


@dataclass(frozen=True)
class LogEvent:
    """One session-visible action.

    For playback kinds (epoch, seq) is the issued version; for everything
    else it is the version the actor's state held when the action happened.
    """

    at: int
    group_id: str
    actor: str
    kind: str
    epoch: int
    seq: int
    detail: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LOG_KINDS:
            raise BadLogRecord("unknown log kind %r" % self.kind)

    def to_dict(self) -> dict:
        return {
            "at": self.at,
            "group_id": self.group_id,
            "actor": self.actor,
            "kind": self.kind,
            "epoch": self.epoch,
            "seq": self.seq,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogEvent":
        try:
            return cls(
                at=int(d["at"]),
                group_id=d["group_id"],
                actor=d["actor"],
                kind=d["kind"],
                epoch=int(d["epoch"]),
                seq=int(d["seq"]),
                detail=dict(d.get("detail", {})),
            )
        except KeyError as e:
            raise BadLogRecord("missing log field %s" % e)


def log_file_name(group_id: str, activation_ms: int) -> str:
    return "%s-%d.log" % (group_id, activation_ms)


class EventLog:
    """Writer facade over a record sink (file-backed or in-memory)."""

    def __init__(self, sink):
        self.sink = sink

    @classmethod
    def open(
        cls,
        directory: str,
        group_id: str,
        activation_ms: int,
        flush_every: int = 8,
        flush_interval_ms: int = 200,
        max_bytes: Optional[int] = None,
    ) -> "EventLog":
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, log_file_name(group_id, activation_ms))
        return cls(RecordWriter(path, flush_every, flush_interval_ms, max_bytes))

    @classmethod
    def in_memory(cls) -> "EventLog":
        return cls(MemoryRecordLog())

    def append(self, ev: LogEvent, now_ms: int = 0) -> int:
        return self.sink.append(ev.to_dict(), now_ms)

    def flush(self) -> None:
        self.sink.flush()

    def close(self) -> None:
        self.sink.close()

    @property
    def records(self) -> List[dict]:
        if isinstance(self.sink, MemoryRecordLog):
            return self.sink.records
        raise SessionError("file-backed log; use read_log on the path")


def read_log(path: str) -> List[LogEvent]:
    """Read a log file, tolerating a torn final line from a crash."""
    raw, _clean = read_record_file(path)
    return [LogEvent.from_dict(r) for r in raw]


def _anchor_state(rec: LogEvent) -> Optional[PlaybackState]:
    st = rec.detail.get("state")
    if st is None:
        return None
    return PlaybackState.from_dict(st)


@dataclass
class ReplayResult:
    state: PlaybackState
    summary: Dict[str, Any]


def replay(
    records: Iterable[LogEvent], manifest: CoursewareManifest
) -> ReplayResult:
    """Re-apply a log and return the terminal playback state plus summary.

    Raises GapDetected when a playback record's sequence number is not
    contiguous with what came before it, which marks a truncated or
    incomplete log.
    """
    records = list(records)
    state = PlaybackState.initial()
    for rec in records:
        anchored = None
        if rec.kind in (JOIN, CONTROL_TRANSFER, FAILOVER_CLAIM):
            anchored = _anchor_state(rec)
        if anchored is not None:
            state = anchored
            continue
        kind = PLAYBACK_KINDS.get(rec.kind)
        if kind is None:
            continue
        if rec.epoch == state.version.epoch:
            expected = state.version.seq + 1
        elif rec.epoch > state.version.epoch:
            expected = 0
        else:
            raise GapDetected(
                "record at epoch %d behind state epoch %d"
                % (rec.epoch, state.version.epoch)
            )
        if rec.seq != expected:
            raise GapDetected(
                "expected seq %d at epoch %d, log has %d" % (expected, rec.epoch, rec.seq)
            )
        if kind is EventKind.SEEK:
            target = rec.detail.get("target_ms")
        elif kind is EventKind.SLIDE_CHANGE:
            target = rec.detail.get("target_slide")
        else:
            target = None
        ev = PlaybackEvent(
            kind=kind,
            issuer=rec.actor,
            issued_version=Version(rec.epoch, rec.seq),
            target=target,
        )
        try:
            state = apply_event(state, ev, manifest)
        except StaleEvent:
            raise GapDetected("non-monotone version in log")
    return ReplayResult(state=state, summary=summarize(records))


def summarize(records: Iterable[LogEvent]) -> Dict[str, Any]:
    """Aggregate navigation and usage statistics from a log.

    Works without the manifest: playback records carry their resulting
    slide index in detail["slide"].
    """
    records = list(records)
    counts: Dict[str, int] = {}
    chat_by_participant: Dict[str, int] = {}
    slide_jumps = 0
    slide_changes = 0
    last_slide: Optional[int] = None
    for rec in records:
        counts[rec.kind] = counts.get(rec.kind, 0) + 1
        if rec.kind == CHAT:
            chat_by_participant[rec.actor] = chat_by_participant.get(rec.actor, 0) + 1
        if rec.kind in (JOIN, CONTROL_TRANSFER, FAILOVER_CLAIM):
            st = rec.detail.get("state")
            if st is not None:
                last_slide = int(st["slide_index"])
                continue
        if rec.kind in PLAYBACK_KINDS:
            slide = rec.detail.get("slide")
            if rec.kind == SLIDE_CHANGE:
                slide_changes += 1
                if (
                    last_slide is not None
                    and slide is not None
                    and abs(int(slide) - last_slide) != 1
                ):
                    slide_jumps += 1
            if slide is not None:
                last_slide = int(slide)
    transfers = counts.get(CONTROL_TRANSFER, 0)
    grants = counts.get(CONTROL_GRANT, 0)
    claims = counts.get(FAILOVER_CLAIM, 0)
    return {
        "records": len(records),
        "counts": counts,
        "seek_count": counts.get(SEEK, 0),
        "slide_change_count": slide_changes,
        "non_sequential_slide_fraction": (
            slide_jumps / slide_changes if slide_changes else 0.0
        ),
        "control_transfer_count": transfers,
        "control_grant_count": grants,
        "failover_claim_count": claims,
        "transfer_tally_consistent": transfers == grants + claims,
        "chat_by_participant": dict(sorted(chat_by_participant.items())),
    }
