"""Peer engine behavior, exercised through short deterministic runs.

These tests drive real engines over the virtual network (quiet links, fixed
5ms latency) and then either inspect the engines directly or poke extra
frames and commands into them mid-run. Wide randomized coverage lives in
test_acceptance.py; this file pins the per-feature contracts.
"""

import pytest

from coplay import wire
from coplay.eventlog import (
    CHAT,
    CONTROL_GRANT,
    CONTROL_TRANSFER,
    PAUSE,
    PLAY,
    SEEK,
)
from coplay.eventlog import LogEvent
from coplay.model import EventKind, PlaybackEvent, Version
from coplay.peer import PeerPhase
from coplay.sim import NetModel, PeerSpec, Scenario, Sim, run_scenario

MANIFEST = {
    "course_id": "unit-course",
    "lecture_id": "unit-lecture",
    "slide_count": 6,
    "duration_ms": 60000,
    "slide_start_ms": [0, 10000, 20000, 30000, 40000, 50000],
}


def scenario(names, duration=20000, script=(), latency=(5, 5), loss=0.0):
    return Scenario(
        name="unit",
        duration_ms=duration,
        manifest=MANIFEST,
        peers=[
            PeerSpec(n, join_at=i * 40, create=(i == 0)) for i, n in enumerate(names)
        ],
        script=[dict(s) for s in script],
        net=NetModel(latency_ms=latency, loss=loss),
    )


def settled(names, duration=20000, script=(), seed=1):
    """Run a quiet scenario to completion and return the Sim for inspection."""
    sim = Sim(scenario(names, duration, script), seed)
    sim.run_until(duration)
    return sim


def records(eng):
    return [LogEvent.from_dict(d) for d in eng.log.records]


# ------------------------------------------------------------ session shape


def test_session_forms_a_star():
    sim = settled(["alice", "bob", "carol"], duration=5000)
    alice, bob, carol = (sim.engines[n] for n in ("alice", "bob", "carol"))
    assert alice.phase is PeerPhase.LEADING and alice.epoch == 0
    assert bob.phase is PeerPhase.FOLLOWING and bob.leader == "alice"
    assert carol.phase is PeerPhase.FOLLOWING and carol.leader == "alice"
    assert sorted(alice.followers) == ["bob", "carol"]
    names = sorted(p for p, _ in alice.roster)
    assert names == ["alice", "bob", "carol"]
    seqs = dict(alice.roster)
    assert seqs["alice"] < seqs["bob"] < seqs["carol"]
    assert bob.roster == alice.roster


def test_manifest_mismatch_is_turned_away():
    sim = Sim(scenario(["alice", "bob"], duration=8000), seed=3)
    sim.engines["bob"].manifest_hash = "0" * 16
    sim.run_until(8000)
    bob = sim.engines["bob"]
    assert bob.phase is PeerPhase.DEPARTED
    assert bob.departed_reason == "ManifestMismatch"
    (group,) = sim.registry.to_snapshot()["groups"]
    assert [m["participant"] for m in group["members"]] == ["alice"]
    assert sorted(p for p, _ in sim.engines["alice"].roster) == ["alice"]


def test_view_exposes_gateway_fields():
    sim = settled(["alice", "bob"], duration=5000)
    view = sim.engines["bob"].view(sim.now)
    assert view["type"] == "ui_state"
    assert view["leader"] == "alice" and view["you_lead"] is False
    assert {m["participant"] for m in view["roster"]} == {"alice", "bob"}
    assert view["playback"]["version"] == {"epoch": 0, "seq": 0}
    assert view["manifest"]["slide_count"] == MANIFEST["slide_count"]


# --------------------------------------------------------------- playback


def test_pause_freezes_live_position():
    script = [
        {"at": 2000, "peer": "alice", "action": "play"},
        {"at": 6500, "peer": "alice", "action": "pause"},
    ]
    sim = settled(["alice", "bob"], script=script)
    alice, bob = sim.engines["alice"], sim.engines["bob"]
    assert alice.state.playing is False
    assert alice.state.media_offset_ms == 4500
    assert bob.state.to_dict() == alice.state.to_dict()
    # the pause click became two events: materialize the position, then stop
    playback = [r for r in records(alice) if r.kind in (PLAY, SEEK, PAUSE)]
    assert [(r.kind, r.epoch, r.seq) for r in playback] == [
        (PLAY, 0, 1),
        (SEEK, 0, 2),
        (PAUSE, 0, 3),
    ]
    assert playback[1].detail["target_ms"] == 4500


def test_play_while_playing_is_idempotent():
    script = [
        {"at": 2000, "peer": "alice", "action": "play"},
        {"at": 3000, "peer": "alice", "action": "play"},
    ]
    sim = settled(["alice", "bob"], script=script)
    plays = [r for r in records(sim.engines["alice"]) if r.kind == PLAY]
    assert len(plays) == 1
    scripted = [r for r in sim.trace.of("script") if r["action"] == "play"]
    assert all(r["ok"] for r in scripted)


def test_playback_commands_require_leadership():
    sim = settled(["alice", "bob"], duration=5000)
    bob = sim.engines["bob"]
    for cmd in (
        {"action": "play"},
        {"action": "pause"},
        {"action": "seek", "ms": 1000},
        {"action": "slide", "index": 2},
    ):
        out = bob.handle_command(cmd, sim.now)
        assert out["ok"] is False and out["error"] == "NotLeader", cmd
    assert bob.state.version.seq == 0


def test_out_of_bounds_targets_rejected():
    sim = settled(["alice"], duration=5000)
    alice = sim.engines["alice"]
    before = alice.state.to_dict()
    for cmd in (
        {"action": "seek", "ms": MANIFEST["duration_ms"] + 1},
        {"action": "seek", "ms": -5},
        {"action": "slide", "index": MANIFEST["slide_count"]},
        {"action": "slide", "index": -1},
    ):
        out = alice.handle_command(cmd, sim.now)
        assert out["ok"] is False and out["error"] == "OutOfBounds"
    assert alice.state.to_dict() == before


def test_stale_epoch_frames_dropped_but_refresh_liveness():
    script = [{"at": 3000, "peer": "alice", "action": "transfer", "participant": "carol"}]
    sim = settled(["alice", "bob", "carol"], script=script)
    bob = sim.engines["bob"]
    assert bob.epoch == 1 and bob.leader == "carol"
    stale = PlaybackEvent(
        kind=EventKind.SEEK,
        issuer="alice",
        issued_version=Version(0, 9),
        target=9000,
    )
    frame = wire.make_frame(
        wire.EVENT,
        "alice",
        group_id=bob.group_id,
        sender="alice",
        epoch=0,
        payload=stale.to_dict(),
    )
    frame["sent_at"] = sim.now
    before = bob.state.to_dict()
    bob.handle_frame("alice", frame, sim.now)
    assert bob.state.to_dict() == before
    # fencing discards the payload, but raw arrival still proves the sender
    # is alive
    assert bob.last_heard["alice"] == sim.now


def test_snapshot_request_answered_by_leader():
    sim = Sim(scenario(["alice", "bob"], duration=6000), seed=2)
    sim.run_until(5000)
    alice = sim.engines["alice"]
    frame = wire.make_frame(
        wire.SNAPSHOT_REQUEST,
        "bob",
        group_id=alice.group_id,
        sender="bob",
        epoch=0,
    )
    alice.handle_frame("bob", frame, sim.now)
    sent = [
        (dst, f)
        for dst, f in alice.endpoint.drain()
        if f["type"] == wire.SYNC_SNAPSHOT
    ]
    assert sent and sent[-1][0] == "bob"
    assert sent[-1][1]["payload"]["state"] == alice.state.to_dict()


# ---------------------------------------------------------------- control


def test_grant_moves_leadership_one_epoch():
    script = [
        {"at": 3000, "peer": "bob", "action": "request_control"},
        {"at": 4000, "peer": "alice", "action": "grant", "participant": "bob"},
    ]
    sim = settled(["alice", "bob"], script=script)
    alice, bob = sim.engines["alice"], sim.engines["bob"]
    assert bob.phase is PeerPhase.LEADING and bob.epoch == 1
    assert alice.phase is PeerPhase.FOLLOWING and alice.leader == "bob"
    assert alice.handoff is None and alice.followers == {}
    outcomes = sim.trace.of("request_outcome")
    assert [(r["peer"], r["outcome"]) for r in outcomes] == [("bob", "granted")]
    # both sides log the same leadership change exactly once
    for eng in (alice, bob):
        grants = [r for r in records(eng) if r.kind == CONTROL_GRANT]
        transfers = [r for r in records(eng) if r.kind == CONTROL_TRANSFER]
        assert [g.detail["to"] for g in grants] == ["bob"]
        assert [t.detail["epoch"] for t in transfers] == [1]


def test_deny_resolves_without_leader_change():
    script = [
        {"at": 3000, "peer": "bob", "action": "request_control"},
        {"at": 4000, "peer": "alice", "action": "deny", "participant": "bob"},
    ]
    sim = settled(["alice", "bob"], script=script)
    alice, bob = sim.engines["alice"], sim.engines["bob"]
    assert alice.phase is PeerPhase.LEADING and alice.epoch == 0
    assert bob.phase is PeerPhase.FOLLOWING and bob.outstanding is None
    outcomes = sim.trace.of("request_outcome")
    assert [(r["peer"], r["outcome"]) for r in outcomes] == [("bob", "denied")]


def test_transfer_supersedes_pending_requests():
    script = [
        {"at": 3000, "peer": "bob", "action": "request_control"},
        {"at": 4000, "peer": "alice", "action": "transfer", "participant": "carol"},
    ]
    sim = settled(["alice", "bob", "carol"], script=script)
    carol, bob = sim.engines["carol"], sim.engines["bob"]
    assert carol.phase is PeerPhase.LEADING and carol.epoch == 1
    assert bob.leader == "carol" and bob.outstanding is None
    outcomes = sim.trace.of("request_outcome")
    assert [(r["peer"], r["outcome"]) for r in outcomes] == [("bob", "superseded")]


def test_deferred_grant_fires_on_late_request():
    sim = Sim(scenario(["alice", "bob"], duration=12000), seed=4)
    sim.run_until(3000)
    out = sim.engines["alice"].handle_command({"action": "grant"}, sim.now)
    assert out == {"ok": True, "deferred": True}
    sim._pump("alice")
    sim.run_until(4000)
    out = sim.engines["bob"].handle_command({"action": "request_control"}, sim.now)
    assert out["ok"] is True
    sim._pump("bob")
    sim.run_until(9000)
    assert sim.engines["bob"].phase is PeerPhase.LEADING
    assert sim.engines["bob"].epoch == 1
    assert sim.engines["alice"].leader == "bob"


def test_request_command_errors():
    sim = settled(["alice", "bob"], duration=5000)
    alice, bob = sim.engines["alice"], sim.engines["bob"]
    out = alice.handle_command({"action": "request_control"}, sim.now)
    assert out["ok"] is False and out["error"] == "AlreadyLeader"
    first = bob.handle_command({"action": "request_control"}, sim.now)
    assert first["ok"] is True and first["token"]
    second = bob.handle_command({"action": "request_control"}, sim.now)
    assert second["ok"] is False and second["error"] == "RequestPending"


def test_unknown_action_rejected():
    sim = settled(["alice"], duration=4000)
    out = sim.engines["alice"].handle_command({"action": "frobnicate"}, sim.now)
    assert out["ok"] is False and out["error"] == "SessionError"


# ------------------------------------------------------------- departures


def test_leader_leave_blocked_while_followers_remain():
    sim = settled(["alice", "bob"], duration=5000)
    out = sim.engines["alice"].handle_command({"action": "leave"}, sim.now)
    assert out["ok"] is False and out["error"] == "LeaderMustTransfer"
    assert sim.engines["alice"].phase is PeerPhase.LEADING


def test_sole_leader_leave_dissolves_group():
    script = [{"at": 3000, "peer": "alice", "action": "leave"}]
    sim = settled(["alice"], duration=8000, script=script)
    assert sim.engines["alice"].phase is PeerPhase.DEPARTED
    assert sim.registry.to_snapshot()["groups"] == []


def test_follower_leave_shrinks_roster_everywhere():
    script = [{"at": 3000, "peer": "carol", "action": "leave"}]
    sim = settled(["alice", "bob", "carol"], script=script)
    alice, carol = sim.engines["alice"], sim.engines["carol"]
    assert carol.phase is PeerPhase.DEPARTED and carol.departed_reason is None
    assert sorted(p for p, _ in alice.roster) == ["alice", "bob"]
    assert "carol" not in alice.followers
    (group,) = sim.registry.to_snapshot()["groups"]
    assert sorted(m["participant"] for m in group["members"]) == ["alice", "bob"]


def test_failover_elects_earliest_survivor():
    script = [
        {"at": 2000, "peer": "alice", "action": "play"},
        {"at": 5000, "peer": "alice", "action": "crash"},
    ]
    sim = settled(["alice", "bob", "carol"], script=script)
    bob, carol = sim.engines["bob"], sim.engines["carol"]
    assert bob.phase is PeerPhase.LEADING and bob.epoch == 1
    assert carol.phase is PeerPhase.FOLLOWING and carol.leader == "bob"
    assert carol.epoch == 1
    (group,) = sim.registry.to_snapshot()["groups"]
    assert group["controller"] == "bob" and group["controller_epoch"] == 1
    assert sorted(m["participant"] for m in group["members"]) == ["bob", "carol"]
    # playback survives the failover: both stayed on the played timeline
    assert bob.state.playing is True
    assert bob.state.to_dict() == carol.state.to_dict()


# ------------------------------------------------------------------- chat


def test_chat_above_limit_rejected():
    sim = settled(["alice", "bob"], duration=5000)
    bob = sim.engines["bob"]
    out = bob.handle_command({"action": "chat", "text": "x" * 3000}, sim.now)
    assert out["ok"] is False and out["error"] == "MessageTooLarge"
    assert bob.pending_chats == {}


def test_chat_sequence_resets_per_epoch():
    script = [
        {"at": 3000, "peer": "bob", "action": "chat", "text": "first"},
        {"at": 5000, "peer": "alice", "action": "transfer", "participant": "carol"},
        {"at": 9000, "peer": "bob", "action": "chat", "text": "second"},
    ]
    sim = settled(["alice", "bob", "carol"], script=script)
    delivered = [
        (r["epoch"], r["chat_seq"])
        for r in sim.trace.of("chat_delivered")
        if r["peer"] == "alice" and r["sender"] == "bob"
    ]
    assert delivered == [(0, 0), (1, 0)]
    texts = [
        (r.detail["chat_seq"], r.detail["text"])
        for r in records(sim.engines["alice"])
        if r.kind == CHAT
    ]
    assert texts == [(0, "first"), (0, "second")]


def test_chat_queued_during_failover_is_delivered_after():
    sim = Sim(
        scenario(
            ["alice", "bob", "carol"],
            duration=20000,
            script=[{"at": 5000, "peer": "alice", "action": "crash"}],
        ),
        seed=6,
    )
    sim.run_until(6700)  # silence noticed, new leader not yet settled
    carol = sim.engines["carol"]
    out = carol.handle_command({"action": "chat", "text": "anyone there?"}, sim.now)
    assert out["ok"] is True
    sim._pump("carol")
    sim.run_until(20000)
    assert carol.pending_chats == {}
    got = [
        r
        for r in sim.trace.of("chat_delivered")
        if r["peer"] == "bob" and r["sender"] == "carol"
    ]
    assert len(got) == 1 and got[0]["epoch"] == 1
