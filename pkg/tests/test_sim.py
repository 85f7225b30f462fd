"""Simulator harness tests: determinism, virtual time, the scenario corpus.

The bundled scenarios double as integration tests here; each one is run at a
few seeds and judged by the verdict checks it declares. The acceptance suite
sweeps the same corpus much wider.
"""

import pathlib
import time as _time

import pytest

from coplay import checks as checkmod
from coplay.sim import Scenario, Sim, run_scenario

SCENARIO_DIR = pathlib.Path(__file__).resolve().parents[1] / "scenarios"
ALL_SCENARIOS = sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))


def load(name: str) -> Scenario:
    return Scenario.load(str(SCENARIO_DIR / (name + ".json")))


def test_scenario_corpus_loads():
    assert len(ALL_SCENARIOS) >= 12
    for name in ALL_SCENARIOS:
        sc = load(name)
        assert sc.name == name
        assert sc.duration_ms > 0
        assert sc.peers
        assert sc.checks, "every bundled scenario declares its verdicts"


def test_every_scenario_declares_core_safety_checks():
    for name in ALL_SCENARIOS:
        sc = load(name)
        names = [c if isinstance(c, str) else c["name"] for c in sc.checks]
        assert "single_leader" in names, name
        assert "epoch_monotone" in names, name


@pytest.mark.parametrize("name", ["slide-sync", "leader-crash", "lossy-playback"])
def test_same_seed_gives_byte_identical_trace(name):
    sc = load(name)
    a = run_scenario(sc, 7).trace.to_jsonl()
    b = run_scenario(sc, 7).trace.to_jsonl()
    assert a == b


def test_different_seeds_diverge():
    sc = load("lossy-playback")
    assert run_scenario(sc, 1).trace.to_jsonl() != run_scenario(sc, 2).trace.to_jsonl()


def test_run_never_touches_the_wall_clock(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("wall clock consulted during a simulated run")

    monkeypatch.setattr(_time, "time", boom)
    monkeypatch.setattr(_time, "monotonic", boom)
    monkeypatch.setattr(_time, "sleep", boom)
    result = run_scenario(load("slide-sync"), 3)
    assert result.finals()


@pytest.mark.parametrize("name", ALL_SCENARIOS)
def test_bundled_scenario_passes_its_checks(name):
    sc = load(name)
    seeds = [1] if name.startswith("frugality") else [1, 2, 3]
    for seed in seeds:
        result = run_scenario(sc, seed)
        for verdict in checkmod.run_checks(result):
            assert verdict.ok, "%s seed %d: %s: %s" % (
                name, seed, verdict.name, verdict.details,
            )


def test_crashed_peer_sends_nothing_afterwards():
    result = run_scenario(load("leader-crash"), 5)
    crash = result.trace.of("crash")[0]
    late = [
        r for r in result.trace.of("net_send")
        if r["src"] == crash["peer"] and r["at"] > crash["at"]
    ]
    assert late == []
    final = result.finals()[crash["peer"]]
    assert final["crashed"] is True


def test_partition_drops_cross_island_frames_both_ways():
    result = run_scenario(load("partition-10s"), 4)
    drops = [r for r in result.trace.of("net_drop") if r["reason"] == "partition"]
    assert drops
    endpoints = {(r["src"], r["dst"]) for r in drops}
    isolated = {a for a, _ in endpoints} & {b for _, b in endpoints}
    assert "alice" in isolated


def test_loss_model_drops_frames_but_checks_still_pass():
    result = run_scenario(load("lossy-playback"), 9)
    assert any(r["reason"] == "loss" for r in result.trace.of("net_drop"))
    for verdict in checkmod.run_checks(result):
        assert verdict.ok, "%s: %s" % (verdict.name, verdict.details)


def test_finals_cover_every_scripted_peer():
    sc = load("slide-sync")
    result = run_scenario(sc, 2)
    assert sorted(result.finals()) == sorted(p.name for p in sc.peers)
    assert result.registry_final()["groups"]


def test_run_until_is_resumable():
    """Stepping a sim in two halves ends in the same state as one run."""
    sc = load("slide-sync")
    whole = run_scenario(sc, 11)

    sim = Sim(sc, 11)
    sim.run_until(sc.duration_ms // 2)
    sim.run_until(sc.duration_ms)
    sim._finals()
    halves = sim.trace.to_jsonl()
    assert halves == whole.trace.to_jsonl()
