"""Command line interface: config layering, verdict output, log tools.

Most cases call cli.main() in process. One test runs the real console
scripts as subprocesses to cover the packaged entry point end to end.
"""

import json
import pathlib
import subprocess
import sys
import time

import pytest

from coplay import cli
from coplay.eventlog import EventLog, LogEvent
from coplay.sim import Scenario, run_scenario

ROOT = pathlib.Path(__file__).resolve().parents[1]
SCENARIO = str(ROOT / "scenarios" / "slide-sync.json")
MANIFEST = str(ROOT / "manifests" / "dist-sys-101.json")


# ---------------------------------------------------------- config layering


def run_cli(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def print_config(argv, capsys):
    code, out, _ = run_cli(argv + ["--print-config"], capsys)
    assert code == 0
    return json.loads(out)


def test_defaults_resolve(capsys, monkeypatch):
    monkeypatch.delenv("COPLAY_SEED", raising=False)
    cfg = print_config(["sim", "run", "ignored.json"], capsys)
    assert cfg["seed"] == 1
    assert cfg["trace_out"] == ""


def test_config_file_overrides_defaults(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("COPLAY_SEED", raising=False)
    path = tmp_path / "conf.json"
    path.write_text(json.dumps({"sim": {"seed": 5}}))
    cfg = print_config(["sim", "run", "ignored.json", "--config", str(path)], capsys)
    assert cfg["seed"] == 5


def test_env_overrides_config_file(capsys, tmp_path, monkeypatch):
    path = tmp_path / "conf.json"
    path.write_text(json.dumps({"sim": {"seed": 5}}))
    monkeypatch.setenv("COPLAY_SEED", "9")
    cfg = print_config(["sim", "run", "ignored.json", "--config", str(path)], capsys)
    assert cfg["seed"] == 9


def test_flags_override_everything(capsys, tmp_path, monkeypatch):
    path = tmp_path / "conf.json"
    path.write_text(json.dumps({"sim": {"seed": 5}}))
    monkeypatch.setenv("COPLAY_SEED", "9")
    cfg = print_config(
        ["sim", "run", "ignored.json", "--config", str(path), "--seed", "11"], capsys
    )
    assert cfg["seed"] == 11


def test_unknown_config_key_is_a_usage_error(capsys, tmp_path):
    path = tmp_path / "conf.json"
    path.write_text(json.dumps({"sim": {"sede": 5}}))
    code, _, err = run_cli(
        ["sim", "run", "ignored.json", "--config", str(path), "--print-config"], capsys
    )
    assert code == 2
    assert "sede" in err


def test_malformed_env_value_is_a_usage_error(capsys, monkeypatch):
    monkeypatch.setenv("COPLAY_SEED", "banana")
    code, _, err = run_cli(["sim", "run", "ignored.json", "--print-config"], capsys)
    assert code == 2
    assert "COPLAY_SEED" in err and "banana" in err


def test_wrong_typed_config_value_is_a_usage_error(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("COPLAY_SEED", raising=False)
    path = tmp_path / "conf.json"
    path.write_text(json.dumps({"sim": {"seed": "five"}}))
    code, _, err = run_cli(
        ["sim", "run", "ignored.json", "--config", str(path), "--print-config"], capsys
    )
    assert code == 2
    assert "seed" in err


def test_bool_env_coercion(capsys, monkeypatch):
    monkeypatch.setenv("COPLAY_CREATE", "yes")
    monkeypatch.setenv("COPLAY_NAME", "alice")
    cfg = print_config(["peer", "run"], capsys)
    assert cfg["create"] is True and cfg["name"] == "alice"


# ----------------------------------------------------------------- verdicts


def test_sim_run_prints_verdicts_and_writes_trace(capsys, tmp_path):
    trace = tmp_path / "out.jsonl"
    code, out, _ = run_cli(
        ["sim", "run", SCENARIO, "--seed", "3", "--trace-out", str(trace)], capsys
    )
    assert code == 0
    assert "CHECK single_leader: PASS" in out
    assert out.strip().endswith("PASS")
    lines = trace.read_bytes().decode("utf-8").splitlines()
    assert len(lines) > 100
    for line in lines[:50]:
        json.loads(line)


def test_sim_run_red_check_exits_one(capsys, tmp_path):
    sc = json.loads(pathlib.Path(SCENARIO).read_text())
    sc["checks"] = [{"name": "frugality", "control_budget_bytes": 1}]
    bad = tmp_path / "impossible.json"
    bad.write_text(json.dumps(sc))
    code, out, _ = run_cli(["sim", "run", str(bad)], capsys)
    assert code == 1
    assert "CHECK frugality: FAIL" in out


def test_sim_sweep_summary(capsys):
    code, out, _ = run_cli(
        ["sim", "sweep", SCENARIO, "--seeds", "3", "--seed-start", "10"], capsys
    )
    assert code == 0
    assert "slide-sync: 3 seeds, all green" in out
    assert "3 runs, 0 failures" in out


# -------------------------------------------------------------------- logs


@pytest.fixture(scope="module")
def written_log(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("logs")
    result = run_scenario(Scenario.load(SCENARIO), 2)
    records = [r["record"] for r in result.trace.of("log") if r["peer"] == "alice"]
    log = EventLog.open(str(tmp), "alice-session", 0)
    for rec in records:
        log.append(LogEvent.from_dict(rec))
    log.close()
    return str(tmp / "alice-session-0.log"), result


def test_log_replay_matches_final_state(capsys, written_log):
    path, result = written_log
    code, out, _ = run_cli(["log", "replay", path, "--manifest", MANIFEST], capsys)
    assert code == 0
    payload = json.loads(out)
    assert payload["state"] == result.finals()["alice"]["state"]
    assert payload["summary"]["transfer_tally_consistent"] is True


def test_log_summarize_counts(capsys, written_log):
    path, _ = written_log
    code, out, _ = run_cli(["log", "summarize", path], capsys)
    assert code == 0
    summary = json.loads(out)
    assert summary["records"] > 0
    assert summary["counts"]["join"] >= 2
    assert summary["seek_count"] >= 1


def test_log_replay_flags_truncated_log(capsys, written_log, tmp_path):
    path, _ = written_log
    lines = pathlib.Path(path).read_bytes().splitlines(keepends=True)
    playback_idx = [
        i
        for i, ln in enumerate(lines)
        if json.loads(ln.split(b" ", 1)[1])["kind"]
        in ("play", "pause", "seek", "slide_change")
    ]
    assert len(playback_idx) >= 2
    torn = tmp_path / "torn.log"
    drop = playback_idx[-2]
    torn.write_bytes(b"".join(ln for i, ln in enumerate(lines) if i != drop))
    code, _, err = run_cli(["log", "replay", str(torn), "--manifest", MANIFEST], capsys)
    assert code == 1
    assert "incomplete log" in err


# --------------------------------------------------------------- subprocess


def test_console_script_live_session(tmp_path):
    env = None
    logs = tmp_path / "logs"
    registry = subprocess.Popen(
        [sys.executable, "-m", "coplay.cli", "registry", "serve",
         "--listen", "127.0.0.1:0", "--run-ms", "6000"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, env=env,
    )
    try:
        banner = registry.stdout.readline()
        assert "listening on" in banner
        address = banner.strip().rsplit(" ", 1)[1]

        common = [
            sys.executable, "-m", "coplay.cli", "peer", "run",
            "--registry", address, "--manifest", MANIFEST, "--run-ms", "3500",
        ]
        alice = subprocess.Popen(
            common + ["--name", "alice", "--create", "--log-dir", str(logs)],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, env=env,
        )
        time.sleep(0.7)
        bob = subprocess.Popen(
            common + ["--name", "bob"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, env=env,
        )
        a_out, _ = alice.communicate(timeout=30)
        b_out, _ = bob.communicate(timeout=30)
        assert alice.returncode == 0, a_out
        assert bob.returncode == 0, b_out
        assert "peer alice listening" in a_out
    finally:
        registry.kill()
        registry.wait()

    (log_path,) = logs.glob("alice-*.log")
    summary = json.loads(
        subprocess.check_output(
            [sys.executable, "-m", "coplay.cli", "log", "summarize", str(log_path)],
            text=True,
        )
    )
    assert summary["counts"]["join"] >= 2
