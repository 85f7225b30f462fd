"""Core types and pure state machines for shared courseware playback.

Everything in this module is deterministic and side-effect free: values in,
new values out. Networking, timers, and persistence live elsewhere and funnel
every state change through `apply_event`, so all nodes that see the same
events in the same version order compute identical states.
"""

from __future__ import annotations

import hashlib
import json
from bisect import bisect_right
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, NamedTuple, Optional, Sequence, Tuple

MAX_PARTICIPANT_BYTES = 64
GROUP_ID_HEX_LEN = 32
CHAT_MAX_BYTES = 2048


class SessionError(Exception):
    """Base for protocol-level errors. `code` is the stable wire identifier."""

    code = "SessionError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class StaleEvent(SessionError):
    code = "StaleEvent"


class OutOfBounds(SessionError):
    code = "OutOfBounds"


class EmptyGroup(SessionError):
    code = "EmptyGroup"


class UnknownRequester(SessionError):
    code = "UnknownRequester"


class BadName(SessionError):
    code = "BadName"


class BadGroupId(SessionError):
    code = "BadGroupId"


class BadManifest(SessionError):
    code = "BadManifest"


def validate_participant(name: str) -> str:
    """Participant names are compared by exact bytes: non-empty UTF-8,
    at most 64 bytes, no control characters."""
    if not isinstance(name, str) or not name:
        raise BadName("participant name must be a non-empty string")
    if len(name.encode("utf-8")) > MAX_PARTICIPANT_BYTES:
        raise BadName("participant name exceeds %d bytes" % MAX_PARTICIPANT_BYTES)
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in name):
        raise BadName("participant name contains control characters")
    return name


def validate_group_id(gid: str) -> str:
    if (
        not isinstance(gid, str)
        or len(gid) != GROUP_ID_HEX_LEN
        or any(c not in "0123456789abcdef" for c in gid)
    ):
        raise BadGroupId("group id must be 32 lowercase hex digits")
    return gid


def new_group_id(randbits) -> str:
    """Mint a fresh 128-bit group id. `randbits` is random.Random.getrandbits
    or compatible, injected so simulations stay seed-deterministic."""
    return "%032x" % randbits(128)


class Version(NamedTuple):
    """Playback state version, ordered lexicographically by (epoch, seq)."""

    epoch: int
    seq: int


def next_version(current: Version, epoch: int) -> Version:
    """Version for the next issued event: seq+1 within the current epoch,
    seq 0 for the first event after a leadership change."""
    if epoch == current.epoch:
        return Version(epoch, current.seq + 1)
    if epoch < current.epoch:
        raise StaleEvent("cannot issue under an older epoch")
    return Version(epoch, 0)


@dataclass(frozen=True)
class CoursewareManifest:
    """Static description of one recorded lecture.

    slide_start_ms[i] is the timeline position where slide i begins; the
    list is non-decreasing, starts at 0, and never exceeds duration_ms.
    """

    course_id: str
    lecture_id: str
    slide_count: int
    duration_ms: int
    slide_start_ms: Tuple[int, ...]

    def __post_init__(self):
        starts = tuple(self.slide_start_ms)
        object.__setattr__(self, "slide_start_ms", starts)
        if self.slide_count < 1:
            raise BadManifest("slide_count must be >= 1")
        if self.duration_ms < 0:
            raise BadManifest("duration_ms must be >= 0")
        if len(starts) != self.slide_count:
            raise BadManifest("slide_start_ms length must equal slide_count")
        if starts[0] != 0:
            raise BadManifest("first slide must start at 0")
        if any(b < a for a, b in zip(starts, starts[1:])):
            raise BadManifest("slide_start_ms must be non-decreasing")
        if starts[-1] > self.duration_ms:
            raise BadManifest("last slide start exceeds duration")

    def slide_at(self, offset_ms: int) -> int:
        """Greatest slide index whose start is <= offset_ms."""
        if offset_ms < 0:
            raise OutOfBounds("offset before start of lecture")
        return bisect_right(self.slide_start_ms, offset_ms) - 1

    def to_dict(self) -> dict:
        return {
            "course_id": self.course_id,
            "lecture_id": self.lecture_id,
            "slide_count": self.slide_count,
            "duration_ms": self.duration_ms,
            "slide_start_ms": list(self.slide_start_ms),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoursewareManifest":
        try:
            return cls(
                course_id=d["course_id"],
                lecture_id=d["lecture_id"],
                slide_count=int(d["slide_count"]),
                duration_ms=int(d["duration_ms"]),
                slide_start_ms=tuple(int(x) for x in d["slide_start_ms"]),
            )
        except KeyError as e:
            raise BadManifest("missing manifest field %s" % e)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PlaybackState:
    """Shared playback position. slide_index always matches the offset per
    the manifest's slide boundaries; version orders accepted events."""

    slide_index: int
    media_offset_ms: int
    playing: bool
    version: Version

    @classmethod
    def initial(cls) -> "PlaybackState":
        return cls(slide_index=0, media_offset_ms=0, playing=False, version=Version(0, 0))

    def to_dict(self) -> dict:
        return {
            "slide_index": self.slide_index,
            "media_offset_ms": self.media_offset_ms,
            "playing": self.playing,
            "version": {"epoch": self.version.epoch, "seq": self.version.seq},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlaybackState":
        v = d["version"]
        return cls(
            slide_index=int(d["slide_index"]),
            media_offset_ms=int(d["media_offset_ms"]),
            playing=bool(d["playing"]),
            version=Version(int(v["epoch"]), int(v["seq"])),
        )


class EventKind(str, Enum):
    PLAY = "play"
    PAUSE = "pause"
    SEEK = "seek"
    SLIDE_CHANGE = "slide_change"


@dataclass(frozen=True)
class PlaybackEvent:
    """One control action issued by the session leader. `target` is the
    seek position (ms) for SEEK, the slide index for SLIDE_CHANGE, else None."""

    kind: EventKind
    issuer: str
    issued_version: Version
    target: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "issuer": self.issuer,
            "issued_version": {
                "epoch": self.issued_version.epoch,
                "seq": self.issued_version.seq,
            },
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlaybackEvent":
        v = d["issued_version"]
        target = d.get("target")
        return cls(
            kind=EventKind(d["kind"]),
            issuer=d["issuer"],
            issued_version=Version(int(v["epoch"]), int(v["seq"])),
            target=None if target is None else int(target),
        )


def apply_event(
    state: PlaybackState, ev: PlaybackEvent, manifest: CoursewareManifest
) -> PlaybackState:
    """Compute the successor playback state.

    Raises StaleEvent when the event's version is not strictly newer (the
    caller drops it silently), OutOfBounds when the target is outside the
    manifest (state unchanged).
    """
    if ev.issued_version <= state.version:
        raise StaleEvent(
            "event version %s not newer than state %s" % (ev.issued_version, state.version)
        )
    if ev.kind is EventKind.PLAY:
        out = replace(state, playing=True, version=ev.issued_version)
    elif ev.kind is EventKind.PAUSE:
        out = replace(state, playing=False, version=ev.issued_version)
    elif ev.kind is EventKind.SEEK:
        t = ev.target
        if t is None or t < 0 or t > manifest.duration_ms:
            raise OutOfBounds("seek target %r outside [0, %d]" % (t, manifest.duration_ms))
        out = replace(
            state,
            media_offset_ms=t,
            slide_index=manifest.slide_at(t),
            version=ev.issued_version,
        )
    elif ev.kind is EventKind.SLIDE_CHANGE:
        n = ev.target
        if n is None or n < 0 or n >= manifest.slide_count:
            raise OutOfBounds("slide %r outside [0, %d)" % (n, manifest.slide_count))
        out = replace(
            state,
            slide_index=n,
            media_offset_ms=manifest.slide_start_ms[n],
            version=ev.issued_version,
        )
    else:  # pragma: no cover - EventKind is closed
        raise SessionError("unknown event kind %r" % (ev.kind,))
    return out


def effective_offset(
    state: PlaybackState, anchor_time_ms: int, now_ms: int, duration_ms: int
) -> int:
    """Current timeline position. While paused this is the stored offset;
    while playing the offset advances with time and saturates at the end."""
    if not state.playing:
        return state.media_offset_ms
    elapsed = max(0, now_ms - anchor_time_ms)
    return min(state.media_offset_ms + elapsed, duration_ms)


def decide_failover_leader(
    members: Iterable[Tuple[str, int]], departed: str
) -> str:
    """Pick the successor after a leader departs: the surviving member who
    joined earliest (lowest join sequence). Deterministic for any ordering
    of the input."""
    survivors = [(p, s) for p, s in members if p != departed]
    if not survivors:
        raise EmptyGroup("no surviving members")
    return min(survivors, key=lambda m: (m[1], m[0]))[0]


@dataclass(frozen=True)
class LeadershipState:
    """Who leads, under which epoch, and which control requests are waiting.

    pending_requests keeps arrival order and never contains the leader.
    """

    leader: str
    epoch: int
    pending_requests: Tuple[str, ...] = ()

    def with_request(self, participant: str) -> "LeadershipState":
        if participant == self.leader or participant in self.pending_requests:
            return self
        return replace(self, pending_requests=self.pending_requests + (participant,))

    def without_request(self, participant: str) -> "LeadershipState":
        return replace(
            self,
            pending_requests=tuple(p for p in self.pending_requests if p != participant),
        )

    def to_dict(self) -> dict:
        return {
            "leader": self.leader,
            "epoch": self.epoch,
            "pending_requests": list(self.pending_requests),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LeadershipState":
        return cls(
            leader=d["leader"],
            epoch=int(d["epoch"]),
            pending_requests=tuple(d.get("pending_requests", ())),
        )


class Decision(NamedTuple):
    kind: str  # "grant" | "deny"
    participant: str


def grant(participant: str) -> Decision:
    return Decision("grant", participant)


def deny(participant: str) -> Decision:
    return Decision("deny", participant)


class Outcome(NamedTuple):
    kind: str  # "granted" | "denied" | "superseded"
    participant: str


def arbitrate(
    lead: LeadershipState, decision: Decision
) -> Tuple[LeadershipState, Tuple[Outcome, ...]]:
    """Resolve one pending control request.

    Granting hands leadership to the requester under epoch+1 and supersedes
    every other pending request; denying removes just that request. Exactly
    one outcome is produced per request that leaves the pending set.
    """
    who = decision.participant
    if who not in lead.pending_requests:
        raise UnknownRequester("no pending request from %r" % who)
    if decision.kind == "grant":
        outcomes = [Outcome("granted", who)]
        outcomes.extend(
            Outcome("superseded", p) for p in lead.pending_requests if p != who
        )
        new = LeadershipState(leader=who, epoch=lead.epoch + 1, pending_requests=())
        return new, tuple(outcomes)
    if decision.kind == "deny":
        return lead.without_request(who), (Outcome("denied", who),)
    raise SessionError("unknown decision kind %r" % (decision.kind,))
