"""Wire-facing registry service.

Requests are frames whose `type` names the operation; replies echo the
request's `req_id`. The node is transport-agnostic: the live TCP driver
and the simulation harness both push decoded frames in and drain the
endpoint's outbox.
"""

from __future__ import annotations

from typing import Any, Callable, Dict, Optional

from . import wire
from .link import Endpoint, LinkConfig
from .registry import Registry, RegistryError
from .store import RegistryStore

OPS = (
    "create_group",
    "list_active_groups",
    "join_group",
    "leave_group",
    "set_active",
    "claim_leadership",
    "get_members",
    "get_group",
)


class RegistryNode:
    def __init__(
        self,
        registry: Registry,
        address: str,
        store: Optional[RegistryStore] = None,
        trace: Optional[Callable[[str, dict], None]] = None,
        link_cfg: Optional[LinkConfig] = None,
    ):
        self.registry = registry
        self.endpoint = Endpoint(address, link_cfg)
        self.store = store
        self.trace = trace
        registry.on_change = self._on_change

    @property
    def address(self) -> str:
        return self.endpoint.address

    def _on_change(self, change: dict) -> None:
        if self.store is not None:
            self.store.record(change)
            self.store.maybe_snapshot(self.registry)
        if self.trace is not None:
            self.trace("registry_change", dict(change))

    # ----------------------------------------------------------- driver API

    def handle_frame(self, src: str, frame: dict, now: int) -> None:
        for msg in self.endpoint.receive(src, frame, now):
            self._handle(src, msg, now)
        self.endpoint.flush_acks(now)

    def on_timer(self, now: int) -> None:
        self.endpoint.on_timer(now)

    def next_wakeup(self) -> Optional[int]:
        return self.endpoint.next_wakeup()

    def drain(self):
        return self.endpoint.drain()

    # ------------------------------------------------------------- handling

    def _handle(self, src: str, msg: dict, now: int) -> None:
        op = msg.get("type")
        req_id = msg.get("req_id")
        if op not in OPS:
            self._reply(src, req_id, now, ok=False, error="UnknownOperation")
            return
        try:
            result = getattr(self, "_op_" + op)(msg, now)
        except RegistryError as e:
            self._reply(src, req_id, now, ok=False, error=e.code, message=str(e))
            return
        self._reply(src, req_id, now, ok=True, result=result)

    def _reply(self, dst: str, req_id: Any, now: int, **fields: Any) -> None:
        frame = wire.make_frame(wire.REPLY, self.address, req_id=req_id, **fields)
        self.endpoint.send(dst, frame, now, reliable=True)

    # ------------------------------------------------------------ operations

    def _op_create_group(self, msg: dict, now: int) -> dict:
        g = self.registry.create_group(
            msg["course_id"], msg["participant"], msg["address"], now
        )
        return {"group": g.to_dict()}

    def _op_list_active_groups(self, msg: dict, now: int) -> dict:
        groups = self.registry.list_active_groups(msg.get("course_id"))
        return {
            "groups": [
                {
                    "group_id": g.group_id,
                    "course_id": g.course_id,
                    "member_count": len(g.members),
                    "controller": g.controller,
                    "created_at": g.created_at,
                }
                for g in groups
            ]
        }

    def _op_join_group(self, msg: dict, now: int) -> dict:
        join_seq, leader, g = self.registry.join_group(
            msg["group_id"], msg["participant"], msg["address"], now
        )
        return {
            "group_id": g.group_id,
            "join_seq": join_seq,
            "leader": leader.to_dict() if leader else None,
            "controller_epoch": g.controller_epoch,
        }

    def _op_leave_group(self, msg: dict, now: int) -> dict:
        remaining, deleted = self.registry.leave_group(
            msg["group_id"],
            msg["participant"],
            by=msg.get("by"),
            epoch=msg.get("epoch"),
            now=now,
        )
        return {"remaining": remaining, "deleted": deleted}

    def _op_set_active(self, msg: dict, now: int) -> dict:
        active = self.registry.set_active(
            msg["group_id"], bool(msg["active"]), msg["by"], now
        )
        return {"active": active}

    def _op_claim_leadership(self, msg: dict, now: int) -> dict:
        epoch = self.registry.claim_leadership(
            msg["group_id"], msg["claimant"], int(msg["expected_epoch"]), now
        )
        members = self.registry.get_members(msg["group_id"])
        return {"epoch": epoch, "members": [m.to_dict() for m in members]}

    def _op_get_members(self, msg: dict, now: int) -> dict:
        g = self.registry.get_group(msg["group_id"])
        members = self.registry.get_members(msg["group_id"])
        return {
            "members": [m.to_dict() for m in members],
            "controller": g.controller,
            "controller_epoch": g.controller_epoch,
            "active": g.active,
        }

    def _op_get_group(self, msg: dict, now: int) -> dict:
        return {"group": self.registry.get_group(msg["group_id"]).to_dict()}
