"""The verdict checks must discriminate: a tampered trace has to fail.

Each test takes a genuinely green run, corrupts one aspect of its trace the
way a real bug would, and asserts the matching check goes red. This guards
against checks that pass vacuously.
"""

import copy
import pathlib

import pytest

from coplay import checks as checkmod
from coplay.sim import Scenario, run_scenario

SCENARIO_DIR = pathlib.Path(__file__).resolve().parents[1] / "scenarios"


@pytest.fixture(scope="module")
def green():
    sc = Scenario.load(str(SCENARIO_DIR / "slide-sync.json"))
    result = run_scenario(sc, 1)
    for verdict in checkmod.run_checks(result):
        assert verdict.ok, verdict
    return result


def tampered(result):
    return copy.deepcopy(result)


def test_single_leader_catches_split_brain(green):
    bad = tampered(green)
    bad.trace.records.append(
        {"at": 500, "kind": "phase", "peer": "bob", "phase": "leading", "epoch": 0}
    )
    assert not checkmod.check_single_leader(bad, {})


def test_epoch_monotone_catches_regression(green):
    bad = tampered(green)
    bad.trace.records.append(
        {"at": 59000, "kind": "phase", "peer": "bob", "phase": "following", "epoch": -1}
    )
    assert not checkmod.check_epoch_monotone(bad, {})


def test_convergence_catches_divergent_final_state(green):
    bad = tampered(green)
    for rec in bad.trace.records:
        if rec["kind"] == "peer_final" and rec["peer"] == "bob":
            rec["state"]["slide_index"] += 1
    assert not checkmod.check_convergence(bad, {})


def test_exactly_one_outcome_catches_double_resolution(green):
    bad = tampered(green)
    outcome = next(r for r in bad.trace.records if r["kind"] == "request_outcome")
    dup = dict(outcome)
    dup["outcome"] = "granted"
    bad.trace.records.append(dup)
    assert not checkmod.check_exactly_one_outcome(bad, {})


def test_frugality_catches_budget_overrun(green):
    assert not checkmod.check_frugality(green, {"control_budget_bytes": 16})
    giant = tampered(green)
    for rec in giant.trace.records:
        if rec["kind"] == "net_send":
            rec["bytes"] = 5000
            break
    assert not checkmod.check_frugality(giant, {})


def test_log_replay_catches_missing_record(green):
    bad = tampered(green)
    idx = next(
        i
        for i, r in enumerate(bad.trace.records)
        if r["kind"] == "log" and r["record"]["kind"] == "slide_change"
    )
    del bad.trace.records[idx]
    assert not checkmod.check_log_replay(bad, {})


def test_registry_integrity_catches_dropped_change(green):
    bad = tampered(green)
    idx = next(
        i
        for i, r in enumerate(bad.trace.records)
        if r["kind"] == "registry_change" and r["change"]["op"] == "join_group"
    )
    del bad.trace.records[idx]
    assert not checkmod.check_registry_integrity(bad, {})


def test_chat_order_catches_conflicting_slots(green):
    bad = tampered(green)
    rec = next(r for r in bad.trace.records if r["kind"] == "chat_delivered")
    clash = dict(rec)
    clash["temp_id"] = "someone-else-9"
    clash["sender"] = "mallory"
    bad.trace.records.append(clash)
    assert not checkmod.check_chat_order(bad, {})


def test_unknown_check_is_reported_not_ignored(green):
    verdicts = checkmod.run_checks(green, ["no_such_check"])
    assert len(verdicts) == 1 and not verdicts[0].ok
