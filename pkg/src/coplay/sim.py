"""Deterministic virtual-time harness.

Runs a registry node plus a set of peer engines against a scripted scenario
on a simulated network. All time is integer virtual milliseconds driven by a
single event heap; all randomness (message loss, latency jitter, duplicate
delivery, group id generation) comes from one seeded generator. The same
scenario and seed always produce a byte-identical trace.

The trace is the product of a run: a flat list of JSON-safe records covering
every network send/deliver/drop, every log record each peer wrote, every
phase change, request outcome, chat delivery, registry mutation, scripted
command, and the final state of every node. Verdict checks consume only the
trace, never live objects, so any reported result can be re-derived from the
trace alone.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field
from random import Random
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from . import wire
from .eventlog import LogEvent
from .model import CoursewareManifest, effective_offset
from .peer import PeerConfig, PeerEngine, PeerPhase
from .records import canonical_json
from .registry import Registry
from .registry_node import RegistryNode

REGISTRY_ADDR = "registry"


# --------------------------------------------------------------- scenario


@dataclass
class NetModel:
    """Stochastic network parameters. Latency is sampled uniformly per frame;
    loss is sampled before latency, so a lost frame consumes one draw."""

    latency_ms: Tuple[int, int] = (10, 40)
    loss: float = 0.0
    duplicate: float = 0.0
    partitions: List[dict] = field(default_factory=list)
    link_loss: List[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "NetModel":
        d = d or {}
        lat = d.get("latency_ms", [10, 40])
        if isinstance(lat, (int, float)):
            lat = [int(lat), int(lat)]
        return cls(
            latency_ms=(int(lat[0]), int(lat[1])),
            loss=float(d.get("loss", 0.0)),
            duplicate=float(d.get("duplicate", 0.0)),
            partitions=list(d.get("partitions", [])),
            link_loss=list(d.get("link_loss", [])),
        )

    def to_dict(self) -> dict:
        return {
            "latency_ms": list(self.latency_ms),
            "loss": self.loss,
            "duplicate": self.duplicate,
            "partitions": self.partitions,
            "link_loss": self.link_loss,
        }


@dataclass
class PeerSpec:
    name: str
    join_at: int = 0
    create: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "PeerSpec":
        return cls(d["name"], int(d.get("join_at", 0)), bool(d.get("create", False)))


@dataclass
class Scenario:
    name: str
    duration_ms: int
    manifest: dict
    peers: List[PeerSpec]
    script: List[dict] = field(default_factory=list)
    net: NetModel = field(default_factory=NetModel)
    checks: List[Any] = field(default_factory=list)
    expect: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)  # protocol timing overrides

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            name=d["name"],
            duration_ms=int(d["duration_ms"]),
            manifest=d["manifest"],
            peers=[PeerSpec.from_dict(p) for p in d["peers"]],
            script=list(d.get("script", [])),
            net=NetModel.from_dict(d.get("net")),
            checks=list(d.get("checks", [])),
            expect=dict(d.get("expect", {})),
            timing=dict(d.get("timing", {})),
        )

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def courseware(self) -> CoursewareManifest:
        return CoursewareManifest.from_dict(self.manifest)


# ------------------------------------------------------------------ trace


class Trace:
    def __init__(self) -> None:
        self.records: List[dict] = []

    def add(self, at: int, kind: str, **fields: Any) -> None:
        rec: Dict[str, Any] = {"at": at, "kind": kind}
        rec.update(fields)
        self.records.append(rec)

    def of(self, kind: str) -> List[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def to_jsonl(self) -> bytes:
        return "".join(canonical_json(r) + "\n" for r in self.records).encode("utf-8")


# ------------------------------------------------------------------- net


class VirtualNet:
    def __init__(self, model: NetModel, rng: Random, trace: Trace, schedule):
        self.model = model
        self.rng = rng
        self.trace = trace
        self.schedule = schedule  # (delay_ms, item) -> None
        self.alive: set = set()
        self._pair_loss: Dict[frozenset, float] = {
            frozenset((o["a"], o["b"])): float(o["loss"]) for o in model.link_loss
        }

    def partitioned(self, a: str, b: str, now: int) -> bool:
        for window in self.model.partitions:
            if not (int(window["from_ms"]) <= now < int(window["until_ms"])):
                continue
            islands: List[List[str]] = window["islands"]
            def island_of(node: str) -> int:
                for i, members in enumerate(islands):
                    if node in members:
                        return i
                return -1  # unlisted nodes share an implicit island
            if island_of(a) != island_of(b):
                return True
        return False

    def send(self, src: str, dst: str, frame: dict, now: int) -> None:
        size = wire.frame_size(frame)
        ftype = frame.get("type", "?")
        self.trace.add(now, "net_send", src=src, dst=dst, frame_type=ftype, bytes=size)
        if dst not in self.alive:
            self.trace.add(now, "net_drop", src=src, dst=dst, frame_type=ftype, reason="crashed")
            return
        if self.partitioned(src, dst, now):
            self.trace.add(now, "net_drop", src=src, dst=dst, frame_type=ftype, reason="partition")
            return
        loss = self._pair_loss.get(frozenset((src, dst)), self.model.loss)
        if loss > 0 and self.rng.random() < loss:
            self.trace.add(now, "net_drop", src=src, dst=dst, frame_type=ftype, reason="loss")
            return
        lo, hi = self.model.latency_ms
        delay = self.rng.randint(lo, hi) if hi > lo else lo
        self.schedule(now + delay, ("deliver", dst, src, frame))
        if self.model.duplicate > 0 and self.rng.random() < self.model.duplicate:
            extra = self.rng.randint(lo, hi) if hi > lo else lo
            self.schedule(now + extra, ("deliver", dst, src, dict(frame)))

    @property
    def max_latency_ms(self) -> int:
        return self.model.latency_ms[1]


# ------------------------------------------------------------------- nodes


class _Node:
    def __init__(self, name: str, handle_frame, on_timer, next_wakeup, drain):
        self.name = name
        self.handle_frame = handle_frame
        self.on_timer = on_timer
        self.next_wakeup = next_wakeup
        self.drain = drain
        self.sched: Optional[int] = None


# --------------------------------------------------------------------- sim


class Sim:
    def __init__(self, scenario: Scenario, seed: int):
        self.sc = scenario
        self.seed = seed
        self.rng = Random(seed)
        self.trace = Trace()
        self.now = 0
        self.heap: List[tuple] = []
        self._ctr = itertools.count()
        self.manifest = scenario.courseware()
        self.net = VirtualNet(scenario.net, self.rng, self.trace, self._schedule)

        registry = Registry([self.manifest.course_id], randbits=self.rng.getrandbits)
        self.registry_node = RegistryNode(
            registry, REGISTRY_ADDR, trace=self._traced
        )
        self.registry = registry

        self.engines: Dict[str, PeerEngine] = {}
        self.nodes: Dict[str, _Node] = {
            REGISTRY_ADDR: _Node(
                REGISTRY_ADDR,
                self.registry_node.handle_frame,
                self.registry_node.on_timer,
                self.registry_node.next_wakeup,
                self.registry_node.drain,
            )
        }
        self.net.alive.add(REGISTRY_ADDR)
        timing = scenario.timing
        for spec in scenario.peers:
            cfg = PeerConfig(
                name=spec.name,
                address=spec.name,
                registry=REGISTRY_ADDR,
                course=self.manifest.course_id,
                create=spec.create,
                **{k: int(v) for k, v in timing.items()},
            )
            engine = PeerEngine(cfg, self.manifest, trace=self._traced)
            self.engines[spec.name] = engine
            self.nodes[spec.name] = _Node(
                spec.name,
                engine.handle_frame,
                engine.on_timer,
                engine.next_wakeup,
                lambda eng=engine: eng.endpoint.drain(),
            )
            self.net.alive.add(spec.name)
        self.crashed_at: Dict[str, int] = {}

    # -- plumbing ----------------------------------------------------------

    def _traced(self, kind: str, fields: dict) -> None:
        if kind == "registry_change":
            # keep the change record intact so a verifier can replay it
            self.trace.add(self.now, kind, change=fields)
        else:
            self.trace.add(self.now, kind, **fields)

    def _schedule(self, at: int, item: tuple) -> None:
        heapq.heappush(self.heap, (max(at, self.now), next(self._ctr), item))

    def _pump(self, name: str) -> None:
        node = self.nodes[name]
        for dst, frame in node.drain():
            self.net.send(name, dst, frame, self.now)
        w = node.next_wakeup()
        if w is not None and (node.sched is None or w < node.sched):
            node.sched = max(w, self.now)
            self._schedule(node.sched, ("timer", name, node.sched))

    # -- event dispatch ------------------------------------------------------

    def prime(self) -> None:
        if getattr(self, "_primed", False):
            return
        self._primed = True
        for spec in self.sc.peers:
            self._schedule(spec.join_at, ("start", spec.name))
        for step in self.sc.script:
            self._schedule(int(step["at"]), ("script", step))

    def run_until(self, t: int) -> None:
        """Process every event up to and including virtual time t."""
        self.prime()
        while self.heap and self.heap[0][0] <= t:
            at, _, item = heapq.heappop(self.heap)
            self.now = at
            self._dispatch(item)
        self.now = max(self.now, t)

    def run(self) -> "SimResult":
        self.run_until(self.sc.duration_ms)
        self.now = self.sc.duration_ms
        self._finals()
        return SimResult(self.sc, self.seed, self.trace)

    def _dispatch(self, item: tuple) -> None:
        kind = item[0]
        if kind == "deliver":
            _, dst, src, frame = item
            if dst not in self.net.alive:
                self.trace.add(
                    self.now, "net_drop", src=src, dst=dst,
                    frame_type=frame.get("type", "?"), reason="crashed",
                )
                return
            self.trace.add(
                self.now, "net_deliver", src=src, dst=dst,
                frame_type=frame.get("type", "?"),
            )
            self.nodes[dst].handle_frame(src, frame, self.now)
            self._pump(dst)
        elif kind == "timer":
            _, name, when = item
            node = self.nodes[name]
            if name not in self.net.alive or node.sched != when:
                return
            node.sched = None
            node.on_timer(self.now)
            self._pump(name)
        elif kind == "start":
            name = item[1]
            if name in self.net.alive:
                self.engines[name].start(self.now)
                self._pump(name)
        elif kind == "script":
            self._run_step(item[1])

    def _run_step(self, step: dict) -> None:
        peer = step["peer"]
        action = step["action"]
        if peer not in self.net.alive:
            self.trace.add(self.now, "script", peer=peer, action=action, skipped="crashed")
            return
        if action == "crash":
            self.net.alive.discard(peer)
            self.nodes[peer].sched = None
            self.crashed_at[peer] = self.now
            self.trace.add(self.now, "crash", peer=peer)
            return
        cmd = {k: v for k, v in step.items() if k not in ("at", "peer")}
        result = self.engines[peer].handle_command(cmd, self.now)
        rec = {"peer": peer, "action": action, "ok": result.get("ok", False)}
        if not result.get("ok"):
            rec["error"] = result.get("error")
        self.trace.add(self.now, "script", **rec)
        self._pump(peer)

    # -- end of run -----------------------------------------------------------

    def _finals(self) -> None:
        for name in sorted(self.engines):
            eng = self.engines[name]
            crashed = name in self.crashed_at
            as_of = self.crashed_at.get(name, self.now)
            self.trace.add(
                self.now,
                "peer_final",
                peer=name,
                crashed=crashed,
                phase=eng.phase.value,
                leader=eng.leader,
                epoch=eng.epoch,
                group_id=eng.group_id,
                state=eng.state.to_dict(),
                effective_offset_ms=effective_offset(
                    eng.state, eng.anchor, as_of, self.manifest.duration_ms
                ),
                applied_events=eng.applied_events,
                pending_chats=len(eng.pending_chats),
                departed_reason=eng.departed_reason,
            )
        self.trace.add(
            self.now, "registry_final", snapshot=self.registry.to_snapshot()
        )


# ------------------------------------------------------------------ results


@dataclass
class SimResult:
    scenario: Scenario
    seed: int
    trace: Trace

    def finals(self) -> Dict[str, dict]:
        return {r["peer"]: r for r in self.trace.of("peer_final")}

    def registry_final(self) -> dict:
        recs = self.trace.of("registry_final")
        return recs[-1]["snapshot"] if recs else {}

    def logs(self) -> Dict[str, List[LogEvent]]:
        out: Dict[str, List[LogEvent]] = {}
        for rec in self.trace.of("log"):
            out.setdefault(rec["peer"], []).append(LogEvent.from_dict(rec["record"]))
        return out

    def requests(self) -> Tuple[List[dict], List[dict]]:
        return self.trace.of("request_open"), self.trace.of("request_outcome")

    def chats(self) -> Dict[str, List[dict]]:
        out: Dict[str, List[dict]] = {}
        for rec in self.trace.of("chat_delivered"):
            out.setdefault(rec["peer"], []).append(rec)
        return out


def run_scenario(scenario: Scenario, seed: int) -> SimResult:
    return Sim(scenario, seed).run()


def sweep(
    scenario: Scenario,
    seeds: Iterable[int],
    progress: Optional[Callable[[int, SimResult], None]] = None,
) -> List[SimResult]:
    results = []
    for seed in seeds:
        result = run_scenario(scenario, seed)
        if progress:
            progress(seed, result)
        results.append(result)
    return results
