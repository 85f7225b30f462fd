"""Trace verdicts.

Every check here consumes only a SimResult's trace, never live engine
objects, so any verdict can be re-derived later from the recorded run.
Scenario files list the checks to apply, either as a bare name or as
{"name": ..., <params>}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

from . import eventlog, wire
from .eventlog import replay, summarize
from .model import PlaybackState, decide_failover_leader
from .registry import Registry
from .records import canonical_json
from .sim import SimResult


@dataclass
class CheckResult:
    name: str
    ok: bool
    details: str = ""

    def __bool__(self) -> bool:
        return self.ok


def _fail(name: str, details: str) -> CheckResult:
    return CheckResult(name, False, details)


def _ok(name: str, details: str = "") -> CheckResult:
    return CheckResult(name, True, details)


# ----------------------------------------------------------------- helpers


def _controller_assignments(result: SimResult) -> List[Tuple[int, str]]:
    """(epoch, controller) in registry order; epoch 0 comes from creation."""
    out: List[Tuple[int, str]] = []
    for rec in result.trace.of("registry_change"):
        change = rec["change"]
        if change["op"] == "create_group":
            out.append((0, change["creator"]))
        elif change["op"] == "claim_leadership":
            out.append((int(change["epoch"]), change["claimant"]))
    return out


def _membership_at(result: SimResult, at_ms: int) -> List[Tuple[str, int]]:
    """Group membership (participant, join_seq) as of a trace time, replayed
    from registry change records."""
    members: Dict[str, int] = {}
    for rec in result.trace.of("registry_change"):
        if rec["at"] > at_ms:
            break
        change = rec["change"]
        if change["op"] == "create_group":
            members[change["creator"]] = 0
        elif change["op"] == "join_group":
            members[change["participant"]] = int(change["join_seq"])
        elif change["op"] == "leave_group":
            members.pop(change["participant"], None)
    return sorted(members.items(), key=lambda m: m[1])


def _connected_peers(result: SimResult) -> List[str]:
    """Peers expected to be attached at the end: not crashed, not expected
    to be partitioned away or departed by the scenario."""
    expect = result.scenario.expect
    out = []
    excluded = set(expect.get("disconnected", [])) | set(expect.get("departed", []))
    for peer, fin in result.finals().items():
        if fin["crashed"] or peer in excluded:
            continue
        out.append(peer)
    return sorted(out)


# ------------------------------------------------------------------ checks


def check_single_leader(result: SimResult, params: dict) -> CheckResult:
    name = "single_leader"
    assigned: Dict[int, str] = {}
    for epoch, controller in _controller_assignments(result):
        if epoch in assigned and assigned[epoch] != controller:
            return _fail(name, "epoch %d assigned to %s and %s" % (epoch, assigned[epoch], controller))
        assigned[epoch] = controller
    leaders_by_epoch: Dict[int, set] = {}
    for rec in result.trace.of("phase"):
        if rec["phase"] == "leading":
            leaders_by_epoch.setdefault(rec["epoch"], set()).add(rec["peer"])
    for epoch, peers in sorted(leaders_by_epoch.items()):
        if len(peers) > 1:
            return _fail(name, "epoch %d led by %s" % (epoch, sorted(peers)))
        leader = next(iter(peers))
        if epoch in assigned and assigned[epoch] != leader:
            return _fail(
                name,
                "epoch %d: registry says %s, %s entered leading" % (epoch, assigned[epoch], leader),
            )
    return _ok(name, "%d epochs" % len(assigned))


def check_epoch_monotone(result: SimResult, params: dict) -> CheckResult:
    name = "epoch_monotone"
    last: Dict[str, int] = {}
    for rec in result.trace.of("phase"):
        peer, epoch = rec["peer"], rec["epoch"]
        if epoch < last.get(peer, 0):
            return _fail(name, "%s saw epoch %d after %d" % (peer, epoch, last[peer]))
        last[peer] = epoch
    prev = None
    for epoch, _controller in _controller_assignments(result):
        if prev is not None and epoch != prev + 1:
            return _fail(name, "registry epoch jumped %s -> %s" % (prev, epoch))
        prev = epoch
    return _ok(name)


def check_convergence(result: SimResult, params: dict) -> CheckResult:
    name = "convergence"
    tol = int(params.get("offset_tolerance_ms", 250))
    peers = _connected_peers(result)
    if not peers:
        return _fail(name, "no connected peers to compare")
    finals = result.finals()
    expected_phases = {"following", "leading"}
    states = set()
    offsets = []
    leaders = set()
    leading = []
    for peer in peers:
        fin = finals[peer]
        if fin["phase"] not in expected_phases:
            return _fail(name, "%s ended %s (%s)" % (peer, fin["phase"], fin["departed_reason"]))
        states.add(canonical_json(fin["state"]))
        offsets.append(fin["effective_offset_ms"])
        leaders.add((fin["leader"], fin["epoch"]))
        if fin["phase"] == "leading":
            leading.append(peer)
    if len(states) != 1:
        return _fail(name, "states diverge: %s" % sorted(states))
    if len(leaders) != 1:
        return _fail(name, "leader views diverge: %s" % sorted(leaders))
    if max(offsets) - min(offsets) > tol:
        return _fail(name, "offsets spread %dms > %dms" % (max(offsets) - min(offsets), tol))
    leader, _epoch = next(iter(leaders))
    if leading != [leader] and sorted(leading) != [leader]:
        return _fail(name, "leading peers %s but agreed leader is %s" % (leading, leader))
    return _ok(name, "%d peers, spread %dms" % (len(peers), max(offsets) - min(offsets)))


def check_exactly_one_outcome(result: SimResult, params: dict) -> CheckResult:
    name = "exactly_one_outcome"
    opens, outcomes = result.requests()
    counts: Dict[str, int] = {}
    for rec in opens:
        counts[rec["token"]] = 0
    for rec in outcomes:
        if rec["token"] not in counts:
            return _fail(name, "outcome for unknown token %r" % rec["token"])
        counts[rec["token"]] += 1
    bad = {t: c for t, c in counts.items() if c != 1}
    if bad:
        return _fail(name, "tokens without exactly one outcome: %s" % sorted(bad.items()))
    return _ok(name, "%d requests" % len(counts))


def check_arbitration_race(result: SimResult, params: dict) -> CheckResult:
    name = "arbitration_race"
    k = int(params["requesters"])
    opens, outcomes = result.requests()
    if len(opens) != k:
        return _fail(name, "expected %d requests, saw %d" % (k, len(opens)))
    single = check_exactly_one_outcome(result, {})
    if not single.ok:
        return _fail(name, single.details)
    kinds = sorted(rec["outcome"] for rec in outcomes)
    granted = kinds.count("granted")
    if granted != 1:
        return _fail(name, "expected exactly one granted, saw %d (%s)" % (granted, kinds))
    rest = [k_ for k_ in kinds if k_ != "granted"]
    if len(rest) != k - 1 or any(k_ not in ("denied", "superseded") for k_ in rest):
        return _fail(name, "losing outcomes malformed: %s" % kinds)
    return _ok(name, "1 granted, %d superseded/denied" % (k - 1))


def check_failover_election(result: SimResult, params: dict) -> CheckResult:
    name = "failover_election"
    timing = result.scenario.timing
    T = int(timing.get("liveness_timeout_ms", 1500))
    H = int(timing.get("heartbeat_ms", 500))
    maxlat = result.scenario.net.latency_ms[1]
    slack = int(params.get("slack_ms", 10))
    crashes = result.trace.of("crash")
    if not crashes:
        return _fail(name, "no crash in trace")
    # the leader at crash time, from phase records
    leading_now: Dict[str, Tuple[str, int]] = {}
    crash = None
    for rec in result.trace.records:
        if rec["kind"] == "phase":
            if rec["phase"] == "leading":
                leading_now[rec["peer"]] = ("leading", rec["epoch"])
            else:
                leading_now.pop(rec["peer"], None)
        elif rec["kind"] == "crash" and rec["peer"] in leading_now:
            crash = rec
            break
    if crash is None:
        return _fail(name, "no leader crash found")
    dead, t_crash = crash["peer"], crash["at"]
    members = _membership_at(result, t_crash)
    expected = decide_failover_leader(members, dead)
    succession = [
        rec
        for rec in result.trace.of("phase")
        if rec["phase"] == "leading" and rec["at"] > t_crash
    ]
    if not succession:
        return _fail(name, "nobody entered leading after the crash")
    first = succession[0]
    if first["peer"] != expected:
        return _fail(
            name,
            "successor %s, but earliest surviving joiner is %s (members %s)"
            % (first["peer"], expected, members),
        )
    deadline = t_crash + T + H + 2 * maxlat + slack
    if first["at"] > deadline:
        return _fail(
            name,
            "election at %d exceeded deadline %d (crash %d)" % (first["at"], deadline, t_crash),
        )
    assigned = dict((e, c) for e, c in _controller_assignments(result))
    if assigned.get(first["epoch"]) != expected:
        return _fail(name, "registry controller for epoch %d is %s" % (first["epoch"], assigned.get(first["epoch"])))
    return _ok(name, "%s elected %dms after crash" % (expected, first["at"] - t_crash))


def check_frugality(result: SimResult, params: dict) -> CheckResult:
    name = "frugality"
    frame_limit = int(params.get("frame_limit", wire.SESSION_FRAME_LIMIT))
    budget = params.get("control_budget_bytes")
    control = 0
    for rec in result.trace.of("net_send"):
        if rec["bytes"] > frame_limit:
            return _fail(
                name,
                "%s frame %s -> %s is %d bytes (limit %d)"
                % (rec["frame_type"], rec["src"], rec["dst"], rec["bytes"], frame_limit),
            )
        if rec["frame_type"] not in wire.LIVENESS_TYPES:
            control += rec["bytes"]
    if budget is not None and control > int(budget):
        return _fail(name, "control bytes %d exceed budget %s" % (control, budget))
    return _ok(name, "control bytes %d" % control)


def control_bytes(result: SimResult) -> int:
    """Total bytes sent excluding liveness traffic (heartbeats and acks)."""
    return sum(
        rec["bytes"]
        for rec in result.trace.of("net_send")
        if rec["frame_type"] not in wire.LIVENESS_TYPES
    )


def check_log_replay(result: SimResult, params: dict) -> CheckResult:
    name = "log_replay"
    manifest = result.scenario.courseware()
    logs = result.logs()
    finals = result.finals()
    for peer in sorted(logs):
        fin = finals.get(peer)
        if fin is None:
            continue
        try:
            outcome = replay(logs[peer], manifest)
        except Exception as e:  # GapDetected or malformed record
            return _fail(name, "%s: replay failed: %s" % (peer, e))
        live = PlaybackState.from_dict(fin["state"])
        if outcome.state != live:
            return _fail(
                name,
                "%s: replayed %s != live %s" % (peer, outcome.state.to_dict(), fin["state"]),
            )
        stats = summarize(logs[peer])
        if not stats["transfer_tally_consistent"]:
            return _fail(name, "%s: leadership change tallies inconsistent: %s" % (peer, stats))
    return _ok(name, "%d logs" % len(logs))


def check_registry_integrity(result: SimResult, params: dict) -> CheckResult:
    name = "registry_integrity"
    fresh = Registry([], randbits=lambda n: 0)
    for rec in result.trace.of("registry_change"):
        fresh.apply_change(rec["change"])
    rebuilt = canonical_json(fresh.to_snapshot())
    recorded = canonical_json(result.registry_final())
    if rebuilt != recorded:
        return _fail(name, "change-log replay diverges from final snapshot")
    return _ok(name)


def check_chat_order(result: SimResult, params: dict) -> CheckResult:
    name = "chat_order"
    strict = bool(params.get("strict", True))
    chats = result.chats()
    if not chats:
        return _ok(name, "no chat traffic")
    sequences = {
        peer: [(c["epoch"], c["chat_seq"], c["sender"], c["temp_id"]) for c in recs]
        for peer, recs in chats.items()
    }
    # one sequencer per epoch: a given (epoch, chat_seq) is one message
    seen: Dict[Tuple[int, int], Tuple[str, Any]] = {}
    for peer, seq in sorted(sequences.items()):
        for epoch, cseq, sender, temp_id in seq:
            key, ident = (epoch, cseq), (sender, temp_id)
            if key in seen and seen[key] != ident:
                return _fail(name, "slot %s carried %s and %s" % (key, seen[key], ident))
            seen[key] = ident
        # each peer's view is delivered in sequencing order
        tags = [(e, c) for e, c, _, _ in seq]
        if tags != sorted(tags):
            return _fail(name, "%s saw out-of-order chat %s" % (peer, tags))
        if len(set(tags)) != len(tags):
            return _fail(name, "%s saw duplicate chat slots" % peer)
    if strict:
        views = {tuple(seq) for peer, seq in sequences.items() if peer in _connected_peers(result)}
        if len(views) > 1:
            return _fail(name, "connected peers saw different transcripts")
    return _ok(name, "%d peers, %d messages" % (len(sequences), len(seen)))


def check_log_completeness(result: SimResult, params: dict) -> CheckResult:
    name = "log_completeness"
    logs = result.logs()
    for spec in result.scenario.peers:
        records = logs.get(spec.name, [])
        if not records:
            return _fail(name, "%s wrote no log records" % spec.name)
        first = records[0]
        if first.kind != eventlog.JOIN or first.actor != spec.name:
            return _fail(name, "%s log does not begin with its own join" % spec.name)
        if "state" not in first.detail:
            return _fail(name, "%s join record carries no adopted state" % spec.name)
    return _ok(name, "%d peers" % len(result.scenario.peers))


def check_no_spurious_pause(result: SimResult, params: dict) -> CheckResult:
    name = "no_spurious_pause"
    scripted = sum(
        1 for step in result.scenario.script if step.get("action") == "pause"
    )
    versions = set()
    for records in result.logs().values():
        for rec in records:
            if rec.kind == eventlog.PAUSE:
                versions.add((rec.epoch, rec.seq))
    if len(versions) > scripted:
        return _fail(
            name, "%d distinct pauses issued but only %d scripted" % (len(versions), scripted)
        )
    return _ok(name, "%d pauses" % len(versions))


def check_final_membership(result: SimResult, params: dict) -> CheckResult:
    name = "final_membership"
    want = sorted(params["members"])
    groups = result.registry_final().get("groups", [])
    if not groups:
        if want:
            return _fail(name, "group deleted but expected members %s" % want)
        return _ok(name, "group deleted")
    got = sorted(m["participant"] for m in groups[0]["members"])
    if got != want:
        return _fail(name, "registry members %s, expected %s" % (got, want))
    controller = groups[0]["controller"]
    if controller not in got:
        return _fail(name, "controller %s is not a member" % controller)
    return _ok(name)


CHECKS: Dict[str, Callable[[SimResult, dict], CheckResult]] = {
    "final_membership": check_final_membership,
    "single_leader": check_single_leader,
    "epoch_monotone": check_epoch_monotone,
    "convergence": check_convergence,
    "exactly_one_outcome": check_exactly_one_outcome,
    "arbitration_race": check_arbitration_race,
    "failover_election": check_failover_election,
    "frugality": check_frugality,
    "log_replay": check_log_replay,
    "registry_integrity": check_registry_integrity,
    "chat_order": check_chat_order,
    "log_completeness": check_log_completeness,
    "no_spurious_pause": check_no_spurious_pause,
}


def run_checks(
    result: SimResult, specs: Optional[List[Any]] = None
) -> List[CheckResult]:
    """Apply the scenario's declared checks (or an explicit list) to a run."""
    specs = result.scenario.checks if specs is None else specs
    out: List[CheckResult] = []
    for spec in specs:
        if isinstance(spec, str):
            spec_name, params = spec, {}
        else:
            spec_name, params = spec["name"], {k: v for k, v in spec.items() if k != "name"}
        fn = CHECKS.get(spec_name)
        if fn is None:
            out.append(_fail(spec_name, "unknown check"))
            continue
        out.append(fn(result, params))
    return out
