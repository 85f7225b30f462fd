"""Sweep the scenario corpus and report protocol statistics.

Beyond pass/fail (which `coplay sim sweep` already gives), this collects
the distributions the checks only bound: failover latency, convergence
spread, control-plane bytes, and retransmit pressure.

    python scripts/sweep_scenarios.py --seeds 50
    python scripts/sweep_scenarios.py --seeds 200 scenarios/leader-crash.json
"""

import argparse
import statistics
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from coplay import checks, wire
from coplay.sim import Scenario, run_scenario

ROOT = Path(__file__).resolve().parent.parent


def failover_latency_ms(result):
    """Crash time to the successor's claim commit, from the trace."""
    crashes = result.trace.of("crash")
    if not crashes:
        return None
    crash_at = crashes[0]["at"]
    for rec in result.trace.of("phase"):
        if rec["at"] >= crash_at and rec["phase"] == "leading":
            return rec["at"] - crash_at
    return None


def convergence_spread_ms(result):
    expect = result.scenario.expect
    gone = set(expect.get("disconnected", [])) | set(expect.get("departed", []))
    offsets = [
        rec["effective_offset_ms"]
        for rec in result.trace.of("peer_final")
        if not rec["crashed"] and rec["peer"] not in gone
    ]
    if len(offsets) < 2:
        return 0
    return max(offsets) - min(offsets)


def retransmit_fraction(result):
    """Rough resend pressure: repeated (src, dst, type, size) control
    frames. Liveness frames are excluded because heartbeats repeat by
    design, and identical payloads alias, so read this as a trend."""
    sends = [
        rec
        for rec in result.trace.of("net_send")
        if rec["frame_type"] not in wire.LIVENESS_TYPES
    ]
    if not sends:
        return 0.0
    seen = set()
    dup = 0
    for rec in sends:
        key = (rec["src"], rec["dst"], rec["frame_type"], rec["bytes"])
        if key in seen:
            dup += 1
        seen.add(key)
    return dup / len(sends)


def fmt_dist(values, unit=""):
    if not values:
        return "n/a"
    if len(values) == 1:
        return "%d%s" % (values[0], unit)
    return "p50=%d p95=%d max=%d%s" % (
        statistics.median(values),
        statistics.quantiles(values, n=20)[18] if len(values) >= 20 else max(values),
        max(values),
        unit,
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenarios", nargs="*", help="scenario files (default: the corpus)")
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--seed-start", type=int, default=1)
    args = ap.parse_args()

    paths = [Path(p) for p in args.scenarios] or sorted((ROOT / "scenarios").glob("*.json"))
    grand_fail = 0
    t0 = time.perf_counter()
    for path in paths:
        sc = Scenario.load(str(path))
        lat, spread, ctrl, retrans = [], [], [], []
        failures = []
        for seed in range(args.seed_start, args.seed_start + args.seeds):
            result = run_scenario(sc, seed)
            for verdict in checks.run_checks(result):
                if not verdict:
                    failures.append("seed %d %s: %s" % (seed, verdict.name, verdict.details))
            fl = failover_latency_ms(result)
            if fl is not None:
                lat.append(fl)
            spread.append(convergence_spread_ms(result))
            ctrl.append(checks.control_bytes(result))
            retrans.append(retransmit_fraction(result))
        grand_fail += len(failures)
        print("%-20s %4d seeds  %s" % (sc.name, args.seeds, "all green" if not failures else "%d FAILURES" % len(failures)))
        if lat:
            print("    failover latency   %s" % fmt_dist(lat, " ms"))
        print("    final offset spread %s" % fmt_dist(spread, " ms"))
        print("    control bytes       %s" % fmt_dist(ctrl, " B"))
        print("    resend fraction     %.3f mean" % (sum(retrans) / len(retrans)))
        for line in failures[:5]:
            print("    FAIL %s" % line)
    dt = time.perf_counter() - t0
    print("%d scenarios x %d seeds in %.1fs, %d failures" % (len(paths), args.seeds, dt, grand_fail))
    return 1 if grand_fail else 0


if __name__ == "__main__":
    sys.exit(main())
