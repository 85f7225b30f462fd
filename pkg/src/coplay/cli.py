"""Command line entry points.

Subcommands:
  coplay registry serve     run the group registry service
  coplay peer run           run one live participant (optionally with the
                            browser gateway)
  coplay sim run            run one scenario at one seed and judge it
  coplay sim sweep          run scenarios across many seeds
  coplay log replay         rebuild final playback state from a session log
  coplay log summarize      aggregate statistics from a session log

Configuration layering, strongest first: command line flags, COPLAY_<KEY>
environment variables, the --config JSON file's section for the subcommand,
built-in defaults. --print-config shows the resolved values and exits.

Exit codes: 0 success, 1 runtime or verdict failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import time
from typing import Any, Dict, List, Optional

from . import checks as checkmod
from .eventlog import EventLog, GapDetected, read_log, replay, summarize
from .gateway import Gateway
from .model import CoursewareManifest, SessionError
from .net import TcpDriver, listen_socket
from .peer import PeerConfig, PeerEngine
from .records import canonical_json
from .registry import Registry
from .registry_node import RegistryNode
from .sim import Scenario, run_scenario
from .store import RegistryStore

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    pass


REGISTRY_DEFAULTS: Dict[str, Any] = {
    "listen": "127.0.0.1:7700",
    "courses": "dist-sys-101",
    "state_dir": "",
    "run_ms": 0,
}

PEER_DEFAULTS: Dict[str, Any] = {
    "name": "",
    "listen": "127.0.0.1:0",
    "registry": "127.0.0.1:7700",
    "course": "",
    "group": "",
    "create": False,
    "manifest": "",
    "gateway": "",
    "static_dir": "",
    "log_dir": "",
    "run_ms": 0,
    "heartbeat_ms": 500,
    "liveness_timeout_ms": 1500,
    "failover_backoff_ms": 750,
}

SIM_DEFAULTS: Dict[str, Any] = {
    "seed": 1,
    "seeds": 20,
    "seed_start": 1,
    "trace_out": "",
}


def _coerce(raw: str, like: Any) -> Any:
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError("expected an integer, got %r" % raw)
    return raw


def _typed(key: str, value: Any, like: Any) -> Any:
    """Validate a config-file value against the default's type."""
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError("config key %r must be a boolean" % key)
        return value
    if isinstance(like, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("config key %r must be an integer" % key)
        return value
    if not isinstance(value, str):
        raise ConfigError("config key %r must be a string" % key)
    return value


def resolve_config(
    section: str,
    defaults: Dict[str, Any],
    config_path: Optional[str],
    args: argparse.Namespace,
) -> Dict[str, Any]:
    cfg = dict(defaults)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("cannot read config %s: %s" % (config_path, e))
        part = data.get(section, {})
        if not isinstance(part, dict):
            raise ConfigError("config section %r must be an object" % section)
        for key, value in part.items():
            if key not in cfg:
                raise ConfigError("unknown %s config key %r" % (section, key))
            cfg[key] = _typed(key, value, defaults[key])
    for key in cfg:
        raw = os.environ.get("COPLAY_" + key.upper())
        if raw is not None:
            try:
                cfg[key] = _coerce(raw, defaults[key])
            except ConfigError as e:
                raise ConfigError("COPLAY_%s: %s" % (key.upper(), e))
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def print_config(cfg: Dict[str, Any]) -> int:
    print(canonical_json(cfg))
    return EXIT_OK


# ------------------------------------------------------------------ registry


def cmd_registry_serve(args: argparse.Namespace) -> int:
    cfg = resolve_config("registry", REGISTRY_DEFAULTS, args.config, args)
    if args.print_config:
        return print_config(cfg)
    courses = [c.strip() for c in str(cfg["courses"]).split(",") if c.strip()]
    if not courses:
        raise ConfigError("at least one course id is required")
    store = RegistryStore(cfg["state_dir"]) if cfg["state_dir"] else None
    registry = Registry(courses, randbits=random.Random().getrandbits)
    if store is not None:
        store.restore_into(registry)
    listener = listen_socket(cfg["listen"])
    address = "%s:%d" % (listener.getsockname()[0], listener.getsockname()[1])
    node = RegistryNode(registry, address, store=store)
    driver = TcpDriver(
        address, node.handle_frame, node.on_timer, node.next_wakeup, node.drain,
        listener=listener,
    )
    print("registry for %s listening on %s" % (",".join(courses), address), flush=True)
    try:
        driver.run(duration_ms=cfg["run_ms"] or None)
    except KeyboardInterrupt:
        pass
    finally:
        if store is not None:
            store.write_snapshot(registry)
            store.close()
        driver.close()
    return EXIT_OK


# ---------------------------------------------------------------------- peer


def cmd_peer_run(args: argparse.Namespace) -> int:
    cfg = resolve_config("peer", PEER_DEFAULTS, args.config, args)
    if args.print_config:
        return print_config(cfg)
    if not cfg["name"]:
        raise ConfigError("--name is required")
    if not cfg["manifest"]:
        raise ConfigError("--manifest is required")
    try:
        with open(cfg["manifest"], "r", encoding="utf-8") as fh:
            manifest = CoursewareManifest.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, SessionError) as e:
        raise ConfigError("bad manifest %s: %s" % (cfg["manifest"], e))

    listener = listen_socket(cfg["listen"])
    address = "%s:%d" % (listener.getsockname()[0], listener.getsockname()[1])
    log = None
    if cfg["log_dir"]:
        log = EventLog.open(cfg["log_dir"], cfg["name"], int(time.time() * 1000))
    try:
        pcfg = PeerConfig(
            name=cfg["name"],
            address=address,
            registry=cfg["registry"],
            course=cfg["course"] or manifest.course_id,
            group_id=cfg["group"] or None,
            create=bool(cfg["create"]),
            heartbeat_ms=int(cfg["heartbeat_ms"]),
            liveness_timeout_ms=int(cfg["liveness_timeout_ms"]),
            failover_backoff_ms=int(cfg["failover_backoff_ms"]),
        )
    except SessionError as e:
        listener.close()
        raise ConfigError(str(e))
    engine = PeerEngine(pcfg, manifest, log=log)
    driver = TcpDriver(
        address,
        engine.handle_frame,
        engine.on_timer,
        engine.next_wakeup,
        engine.endpoint.drain,
        listener=listener,
    )
    gateway = None
    if cfg["gateway"]:
        gateway = Gateway(driver, engine, cfg["gateway"], cfg["static_dir"] or None)
        print(
            "gateway for %s on http://127.0.0.1:%d/" % (cfg["name"], gateway.port),
            flush=True,
        )
    print("peer %s listening on %s" % (cfg["name"], address), flush=True)
    engine.start(driver.now_ms())
    try:
        driver.run(duration_ms=cfg["run_ms"] or None)
    except KeyboardInterrupt:
        engine.handle_command({"action": "leave"}, driver.now_ms())
        driver.run(duration_ms=250)  # let the goodbye and registry call flush
    finally:
        if gateway is not None:
            gateway.close()
        driver.close()
        if log is not None:
            log.close()
    ok = engine.departed_reason is None
    if not ok:
        print("departed: %s" % engine.departed_reason, file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


# ----------------------------------------------------------------------- sim


def _judge(result, verbose: bool = True) -> bool:
    all_ok = True
    for verdict in checkmod.run_checks(result):
        ok = bool(verdict)
        all_ok = all_ok and ok
        if verbose or not ok:
            line = "CHECK %s: %s" % (verdict.name, "PASS" if ok else "FAIL")
            if verdict.details and not ok:
                line += " (%s)" % verdict.details
            print(line)
    return all_ok


def cmd_sim_run(args: argparse.Namespace) -> int:
    cfg = resolve_config("sim", SIM_DEFAULTS, args.config, args)
    if args.print_config:
        return print_config(cfg)
    scenario = Scenario.load(args.scenario)
    result = run_scenario(scenario, int(cfg["seed"]))
    if cfg["trace_out"]:
        with open(cfg["trace_out"], "wb") as fh:
            fh.write(result.trace.to_jsonl())
        print("trace: %s (%d records)" % (cfg["trace_out"], len(result.trace.records)))
    ok = _judge(result)
    print("scenario %s seed %d: %s" % (scenario.name, cfg["seed"], "PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sim_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config("sim", SIM_DEFAULTS, args.config, args)
    if args.print_config:
        return print_config(cfg)
    seeds = range(int(cfg["seed_start"]), int(cfg["seed_start"]) + int(cfg["seeds"]))
    failures: List[str] = []
    total = 0
    for path in args.scenarios:
        scenario = Scenario.load(path)
        bad = 0
        for seed in seeds:
            total += 1
            result = run_scenario(scenario, seed)
            for verdict in checkmod.run_checks(result):
                if not verdict:
                    bad += 1
                    failures.append(
                        "%s seed %d %s: %s"
                        % (scenario.name, seed, verdict.name, verdict.details)
                    )
        print(
            "%s: %d seeds, %s"
            % (scenario.name, len(seeds), "all green" if bad == 0 else "%d FAILURES" % bad)
        )
    for line in failures:
        print("FAIL " + line)
    print("%d runs, %d failures" % (total, len(failures)))
    return EXIT_OK if not failures else EXIT_FAIL


# ----------------------------------------------------------------------- log


def cmd_log_replay(args: argparse.Namespace) -> int:
    try:
        with open(args.manifest, "r", encoding="utf-8") as fh:
            manifest = CoursewareManifest.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, SessionError) as e:
        raise ConfigError("bad manifest %s: %s" % (args.manifest, e))
    records = read_log(args.log)
    try:
        out = replay(records, manifest)
    except GapDetected as e:
        print("incomplete log: %s" % e, file=sys.stderr)
        return EXIT_FAIL
    print(canonical_json({"state": out.state.to_dict(), "summary": out.summary}))
    return EXIT_OK


def cmd_log_summarize(args: argparse.Namespace) -> int:
    print(canonical_json(summarize(read_log(args.log))))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file with per-command sections")
    p.add_argument(
        "--print-config",
        action="store_true",
        help="print the resolved configuration and exit",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coplay", description="synchronized lecture playback sessions"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    registry = sub.add_parser("registry", help="registry service").add_subparsers(
        dest="subcommand", required=True
    )
    serve = registry.add_parser("serve", help="run the registry")
    _add_config_flags(serve)
    serve.add_argument("--listen", help="host:port to listen on")
    serve.add_argument("--courses", help="comma separated course ids")
    serve.add_argument("--state-dir", dest="state_dir", help="durable state directory")
    serve.add_argument("--run-ms", dest="run_ms", type=int, help="stop after this long")
    serve.set_defaults(fn=cmd_registry_serve)

    peer = sub.add_parser("peer", help="live participant").add_subparsers(
        dest="subcommand", required=True
    )
    run = peer.add_parser("run", help="run one participant")
    _add_config_flags(run)
    run.add_argument("--name", help="participant name")
    run.add_argument("--listen", help="host:port for session traffic (port 0 = any)")
    run.add_argument("--registry", help="registry host:port")
    run.add_argument("--course", help="course id (defaults to the manifest's)")
    run.add_argument("--group", help="join this group id instead of searching")
    run.add_argument("--create", action="store_const", const=True, help="found a new group")
    run.add_argument("--manifest", help="courseware manifest JSON file")
    run.add_argument("--gateway", help="host:port for the browser gateway")
    run.add_argument("--static-dir", dest="static_dir", help="web client files to serve")
    run.add_argument("--log-dir", dest="log_dir", help="write the session log here")
    run.add_argument("--run-ms", dest="run_ms", type=int, help="stop after this long")
    run.add_argument("--heartbeat-ms", dest="heartbeat_ms", type=int)
    run.add_argument("--liveness-timeout-ms", dest="liveness_timeout_ms", type=int)
    run.add_argument("--failover-backoff-ms", dest="failover_backoff_ms", type=int)
    run.set_defaults(fn=cmd_peer_run)

    sim = sub.add_parser("sim", help="deterministic simulation").add_subparsers(
        dest="subcommand", required=True
    )
    simrun = sim.add_parser("run", help="run one scenario at one seed")
    _add_config_flags(simrun)
    simrun.add_argument("scenario", help="scenario JSON file")
    simrun.add_argument("--seed", type=int, help="random seed")
    simrun.add_argument("--trace-out", dest="trace_out", help="write the trace JSONL here")
    simrun.set_defaults(fn=cmd_sim_run)

    sweep = sim.add_parser("sweep", help="run scenarios across many seeds")
    _add_config_flags(sweep)
    sweep.add_argument("scenarios", nargs="+", help="scenario JSON files")
    sweep.add_argument("--seeds", type=int, help="number of seeds")
    sweep.add_argument("--seed-start", dest="seed_start", type=int, help="first seed")
    sweep.set_defaults(fn=cmd_sim_sweep)

    logp = sub.add_parser("log", help="session log tools").add_subparsers(
        dest="subcommand", required=True
    )
    rep = logp.add_parser("replay", help="rebuild final state from a log")
    rep.add_argument("log", help="session log file")
    rep.add_argument("--manifest", required=True, help="courseware manifest JSON file")
    rep.set_defaults(fn=cmd_log_replay)

    summ = logp.add_parser("summarize", help="aggregate statistics from a log")
    summ.add_argument("log", help="session log file")
    summ.set_defaults(fn=cmd_log_summarize)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except SessionError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_FAIL
    except OSError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
