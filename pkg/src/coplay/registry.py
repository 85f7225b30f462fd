"""Group directory and leadership arbiter.

The registry knows which groups exist for which courses, who is in them,
which endpoint each member listens on, whether a group still accepts
joins, and who currently controls each group. Leadership changes go
through a compare-and-set on the controller epoch, which is what makes
"exactly one leader per epoch" a fact rather than a hope.

The registry never monitors liveness and never elects anyone by itself;
peers detect failures and claim leadership here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from .model import (
    SessionError,
    new_group_id,
    validate_group_id,
    validate_participant,
)


class RegistryError(SessionError):
    pass


class UnknownCourse(RegistryError):
    code = "UnknownCourse"


class UnknownGroup(RegistryError):
    code = "UnknownGroup"


class GroupInactive(RegistryError):
    code = "GroupInactive"


class DuplicateParticipant(RegistryError):
    code = "DuplicateParticipant"


class DuplicateAddress(RegistryError):
    code = "DuplicateAddress"


class NotAMember(RegistryError):
    code = "NotAMember"


class NotController(RegistryError):
    code = "NotController"


class EpochConflict(RegistryError):
    code = "EpochConflict"


class StaleRemoval(RegistryError):
    code = "StaleRemoval"


@dataclass
class MemberEntry:
    participant: str
    address: str
    join_seq: int

    def to_dict(self) -> dict:
        return {
            "participant": self.participant,
            "address": self.address,
            "join_seq": self.join_seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemberEntry":
        return cls(d["participant"], d["address"], int(d["join_seq"]))


@dataclass
class GroupRecord:
    group_id: str
    course_id: str
    active: bool
    members: List[MemberEntry]
    controller: str
    controller_epoch: int
    created_at: int
    next_join_seq: int

    def member(self, participant: str) -> Optional[MemberEntry]:
        for m in self.members:
            if m.participant == participant:
                return m
        return None

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "course_id": self.course_id,
            "active": self.active,
            "members": [m.to_dict() for m in self.members],
            "controller": self.controller,
            "controller_epoch": self.controller_epoch,
            "created_at": self.created_at,
            "next_join_seq": self.next_join_seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupRecord":
        return cls(
            group_id=d["group_id"],
            course_id=d["course_id"],
            active=bool(d["active"]),
            members=[MemberEntry.from_dict(m) for m in d["members"]],
            controller=d["controller"],
            controller_epoch=int(d["controller_epoch"]),
            created_at=int(d["created_at"]),
            next_join_seq=int(d["next_join_seq"]),
        )


class Registry:
    """In-memory authority over groups. All mutations are serialized by the
    single-threaded node driver; each one emits a change record through
    `on_change` for persistence and auditing."""

    def __init__(
        self,
        courses: Iterable[str],
        randbits: Callable[[int], int],
        on_change: Optional[Callable[[dict], None]] = None,
    ):
        self.courses = set(courses)
        self.randbits = randbits
        self.on_change = on_change
        self.groups: Dict[str, GroupRecord] = {}
        self.change_count = 0

    # ------------------------------------------------------------- reads

    def get_group(self, group_id: str) -> GroupRecord:
        g = self.groups.get(group_id)
        if g is None:
            raise UnknownGroup("no group %s" % group_id)
        return g

    def list_active_groups(self, course_id: Optional[str] = None) -> List[GroupRecord]:
        out = [
            g
            for g in self.groups.values()
            if g.active and (course_id is None or g.course_id == course_id)
        ]
        out.sort(key=lambda g: (g.created_at, g.group_id))
        return out

    def get_members(self, group_id: str) -> List[MemberEntry]:
        g = self.get_group(group_id)
        return sorted(g.members, key=lambda m: m.join_seq)

    # --------------------------------------------------------- mutations

    def _emit(self, change: dict) -> None:
        self.change_count += 1
        change["n"] = self.change_count
        if self.on_change:
            self.on_change(change)

    def create_group(
        self, course_id: str, creator: str, address: str, now: int
    ) -> GroupRecord:
        validate_participant(creator)
        if course_id not in self.courses:
            raise UnknownCourse("no course %r" % course_id)
        for g in self.groups.values():
            if g.active and any(m.address == address for m in g.members):
                raise DuplicateAddress(
                    "%s already registered in active group %s" % (address, g.group_id)
                )
        group_id = new_group_id(self.randbits)
        while group_id in self.groups:  # pragma: no cover - 128-bit collision
            group_id = new_group_id(self.randbits)
        g = GroupRecord(
            group_id=group_id,
            course_id=course_id,
            active=True,
            members=[MemberEntry(creator, address, 0)],
            controller=creator,
            controller_epoch=0,
            created_at=now,
            next_join_seq=1,
        )
        self.groups[group_id] = g
        self._emit(
            {
                "op": "create_group",
                "group_id": group_id,
                "course_id": course_id,
                "creator": creator,
                "address": address,
                "created_at": now,
            }
        )
        return g

    def join_group(
        self, group_id: str, participant: str, address: str, now: int
    ) -> Tuple[int, MemberEntry, GroupRecord]:
        validate_participant(participant)
        g = self.get_group(group_id)
        if not g.active:
            raise GroupInactive("group %s is not accepting joins" % group_id)
        if g.member(participant) is not None:
            raise DuplicateParticipant("%r already in group" % participant)
        entry = MemberEntry(participant, address, g.next_join_seq)
        g.members.append(entry)
        g.next_join_seq += 1
        leader = g.member(g.controller)
        self._emit(
            {
                "op": "join_group",
                "group_id": group_id,
                "participant": participant,
                "address": address,
                "join_seq": entry.join_seq,
                "at": now,
            }
        )
        return entry.join_seq, leader, g

    def leave_group(
        self,
        group_id: str,
        participant: str,
        by: Optional[str] = None,
        epoch: Optional[int] = None,
        now: int = 0,
    ) -> Tuple[int, bool]:
        """Remove a member. A member may always remove itself, including a
        controller leaving without a prior transfer (repair is the peers'
        job). Removal of someone else must come from the current controller
        under the current epoch, so removals queued before a leadership
        change cannot evict the new controller."""
        g = self.get_group(group_id)
        entry = g.member(participant)
        if entry is None:
            raise NotAMember("%r not in group" % participant)
        if by is not None and by != participant:
            if by != g.controller:
                raise NotController("%r is not the controller" % by)
            if epoch is not None and epoch != g.controller_epoch:
                raise StaleRemoval(
                    "removal under epoch %s but controller epoch is %d"
                    % (epoch, g.controller_epoch)
                )
        g.members.remove(entry)
        deleted = not g.members
        if deleted:
            del self.groups[group_id]
        self._emit(
            {
                "op": "leave_group",
                "group_id": group_id,
                "participant": participant,
                "deleted": deleted,
                "at": now,
            }
        )
        return len(g.members), deleted

    def set_active(self, group_id: str, active: bool, by: str, now: int = 0) -> bool:
        g = self.get_group(group_id)
        if by != g.controller:
            raise NotController("%r is not the controller" % by)
        g.active = bool(active)
        self._emit(
            {"op": "set_active", "group_id": group_id, "active": g.active, "at": now}
        )
        return g.active

    def claim_leadership(
        self, group_id: str, claimant: str, expected_epoch: int, now: int = 0
    ) -> int:
        """Compare-and-set on the controller epoch. Exactly one claim under
        any given expected epoch can ever succeed."""
        g = self.get_group(group_id)
        if g.member(claimant) is None:
            raise NotAMember("%r not in group" % claimant)
        if g.controller_epoch != expected_epoch:
            raise EpochConflict(
                "expected epoch %d but controller epoch is %d"
                % (expected_epoch, g.controller_epoch)
            )
        g.controller = claimant
        g.controller_epoch = expected_epoch + 1
        self._emit(
            {
                "op": "claim_leadership",
                "group_id": group_id,
                "claimant": claimant,
                "epoch": g.controller_epoch,
                "at": now,
            }
        )
        return g.controller_epoch

    # ------------------------------------------------------- persistence

    def to_snapshot(self) -> dict:
        return {
            "change_count": self.change_count,
            "groups": [self.groups[k].to_dict() for k in sorted(self.groups)],
        }

    def load_snapshot(self, snap: dict) -> None:
        self.change_count = int(snap.get("change_count", 0))
        self.groups = {
            g["group_id"]: GroupRecord.from_dict(g) for g in snap.get("groups", [])
        }

    def apply_change(self, change: dict) -> None:
        """Replay one persisted change record. Assigned values (ids, join
        sequences, epochs, timestamps) come from the record, so replay is
        exact regardless of the current id source."""
        op = change["op"]
        if op == "create_group":
            gid = change["group_id"]
            self.groups[gid] = GroupRecord(
                group_id=gid,
                course_id=change["course_id"],
                active=True,
                members=[MemberEntry(change["creator"], change["address"], 0)],
                controller=change["creator"],
                controller_epoch=0,
                created_at=int(change["created_at"]),
                next_join_seq=1,
            )
        elif op == "join_group":
            g = self.get_group(change["group_id"])
            g.members.append(
                MemberEntry(
                    change["participant"], change["address"], int(change["join_seq"])
                )
            )
            g.next_join_seq = int(change["join_seq"]) + 1
        elif op == "leave_group":
            g = self.get_group(change["group_id"])
            entry = g.member(change["participant"])
            if entry is not None:
                g.members.remove(entry)
            if change.get("deleted"):
                self.groups.pop(change["group_id"], None)
        elif op == "set_active":
            self.get_group(change["group_id"]).active = bool(change["active"])
        elif op == "claim_leadership":
            g = self.get_group(change["group_id"])
            g.controller = change["claimant"]
            g.controller_epoch = int(change["epoch"])
        else:
            raise SessionError("unknown change op %r" % op)
        self.change_count = int(change["n"])
