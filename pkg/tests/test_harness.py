import csv
import json
import os
import subprocess
import sys

import pytest

from bftlab.harness import cli
from bftlab.harness.config import (
    ScenarioConfig, bundled, bundled_names, from_dict, load, to_dict,
)
from bftlab.harness.metrics import emit_metrics
from bftlab.harness.plotting import render
from bftlab.harness.runner import RunReport, run_scenario, trace_lines
from bftlab.harness.safety import BrokenChain, Ok, Violation, verdict_dict, verify_safety
from bftlab.ledger import ChainBuilder, Transaction, chain_to_json
from bftlab.runtime import InvalidConfig
from bftlab.simnet import Crash, Mute

from conftest import run


# --- config ---

def test_roundtrip_every_bundled_scenario():
    for name in bundled_names():
        cfg = bundled(name)
        assert to_dict(from_dict(to_dict(cfg))) == to_dict(cfg)


def test_schema_errors_name_the_field():
    with pytest.raises(InvalidConfig, match="protocol"):
        from_dict({"version": 1, "protocol": "raft"})
    with pytest.raises(InvalidConfig, match="n"):
        from_dict({"version": 1, "protocol": "pbft", "n": "four"})


def test_semantic_errors():
    with pytest.raises(InvalidConfig, match="3f"):
        ScenarioConfig("pbft", n=3, f=1).validate()
    with pytest.raises(InvalidConfig, match="adversary"):
        ScenarioConfig("pbft", n=4, f=1, adversary={0: Crash(), 1: Crash()}).validate()
    with pytest.raises(InvalidConfig, match="clusters"):
        ScenarioConfig("geobft", n=8, f=1, clusters=(4, 3)).validate()
    with pytest.raises(InvalidConfig, match="adversary"):
        ScenarioConfig("pbft", n=4, f=1, adversary={9: Crash()}).validate()
    with pytest.raises(InvalidConfig, match="client"):
        ScenarioConfig("pbft", n=4, f=1, adversary={"c0": Crash()}).validate()


def test_load_with_overrides(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(to_dict(bundled("pbft_failure_free"))))
    cfg = load(p, {"n": 7, "f": 2, "seed": None})
    assert (cfg.n, cfg.f) == (7, 2)
    assert cfg.seed == bundled("pbft_failure_free").seed


# --- runner ---

def test_bundled_scenarios_run_as_declared():
    for name in bundled_names():
        cfg = bundled(name)
        report = run_scenario(cfg)
        assert report.metrics["end_time"] <= cfg.duration
        assert report.ok == (cfg.expect == "ok"), name
        assert verdict_dict(verify_safety(report)) == report.verdict, name


def test_pbft_failure_free_hundred_requests():
    r = run("pbft", clients=4, requests=25)
    assert r.metrics["completed"] == 100
    assert r.metrics["replicas_with_all_requests"] == 4
    assert r.metrics["view_changes"] == 0


def test_pbft_mute_primary_recovers():
    r = run("pbft", clients=4, requests=25, adversary={0: Mute(0)})
    assert r.metrics["view_changes"] >= 1
    assert r.metrics["completed"] == 100
    assert r.ok


def test_report_json_roundtrip_and_determinism():
    a = run("poe", clients=2, requests=5, trace=True, seed=3)
    b = run("poe", clients=2, requests=5, trace=True, seed=3)
    assert a.to_json() == b.to_json()
    assert trace_lines(a.trace) == trace_lines(b.trace)
    assert RunReport.from_json(a.to_json()).to_json() == a.to_json()


# --- safety ---

def chains_with_fork(at: int, length: int = 6):
    out = {}
    for r, tag in (("0", "a"), ("1", "a"), ("2", "b")):
        b = ChainBuilder()
        for i in range(1, length):
            payload = f"SET k{i} {tag if i == at and r == '2' else 'a'}".encode()
            b.append(b.make_block((Transaction("c0", i, payload),)))
        out[r] = chain_to_json(b.freeze())
    return out


def report_for(chains, faulty=()):
    return RunReport({"protocol": "pbft"}, chains, list(faulty), {"ok": True}, {}, [], "")


def test_safety_ok_on_equal_chains():
    ch = chains_with_fork(at=99)
    assert verify_safety(report_for(ch)) == Ok()


def test_safety_violation_at_seq_3():
    v = verify_safety(report_for(chains_with_fork(at=3)))
    assert isinstance(v, Violation)
    assert v.seq == 3
    assert v.replicas == ("0", "2")
    assert v.digests[0] != v.digests[1]


def test_faulty_replicas_are_excluded():
    assert verify_safety(report_for(chains_with_fork(at=3), faulty=[2])) == Ok()


def test_shorter_chain_is_a_prefix_not_a_violation():
    ch = chains_with_fork(at=99)
    ch["1"] = ch["1"][:3]
    assert verify_safety(report_for(ch)) == Ok()


def test_broken_chain_reported():
    ch = chains_with_fork(at=99)
    ch["1"][4]["number"] = 7
    assert verify_safety(report_for(ch)) == BrokenChain("1", 4)


# --- metrics and figures ---

def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pbft_decision_row(tmp_path):
    r = run("pbft", requests=3)
    csv_path, json_path = emit_metrics(r, tmp_path / "pbft")
    rows = read_csv(csv_path)
    assert len(rows) == 3
    for row in rows:
        assert row["protocol"] == "pbft"
        assert (int(row["PrePrepare"]), int(row["Prepare"]), int(row["CommitVote"])) == (3, 9, 12)
        assert int(row["total"]) == 24
        assert float(row["latency"]) > 0
    summary = json.loads(json_path.read_text())
    assert summary["completed"] == 3 and summary["verdict"] == {"ok": True}


def test_poe_decision_total(tmp_path):
    r = run("poe", requests=3)
    rows = read_csv(emit_metrics(r, tmp_path / "poe.csv")[0])
    assert [int(x["total"]) for x in rows] == [9, 9, 9]


def test_empty_run_header_only(tmp_path):
    r = run("pbft", requests=0)
    csv_path, _ = emit_metrics(r, tmp_path / "empty")
    lines = csv_path.read_text().splitlines()
    assert lines == ["protocol,seq,total,latency"]


def test_render_writes_pngs(tmp_path):
    r = run("pbft", requests=3)
    paths = render(r, tmp_path / "pbft")
    assert [p.name for p in paths] == ["pbft.messages.png", "pbft.latency.png"]
    for p in paths:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


# --- CLI ---

def test_cli_run_verify_compare(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", "pbft_failure_free", "--out", str(out), "--requests", "2",
                     "--seeds", "2"]) == 0
    names = sorted(p.name for p in out.iterdir())
    for seed in (0, 1):
        stem = f"pbft_failure_free-seed{seed}"
        for suffix in (".report.json", ".trace.jsonl", ".csv", ".json", ".messages.png", ".latency.png"):
            assert stem + suffix in names
    a, b = out / "pbft_failure_free-seed0.report.json", out / "pbft_failure_free-seed1.report.json"
    assert cli.main(["verify", "--report", str(a)]) == 0
    assert cli.main(["compare", "--reports", str(a), str(b), "--metric", "messages"]) == 0
    assert "ratio" in capsys.readouterr().out


def test_cli_violation_exit_code(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", "zyzzyva_divergence", "--out", str(out), "--no-plots"]) == 2
    report = next(out.glob("*.report.json"))
    assert cli.main(["verify", "--report", str(report)]) == 2


def test_cli_errors_exit_1(tmp_path, capsys):
    assert cli.main(["run", "--scenario", "no_such_thing", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 1, "protocol": "pbft", "n": 3}))
    assert cli.main(["run", "--scenario", str(bad), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_verify_detects_tampered_report(tmp_path):
    out = tmp_path / "out"
    cli.main(["run", "--scenario", "poe_out_of_order", "--out", str(out), "--no-plots", "--requests", "2"])
    path = next(out.glob("*.report.json"))
    d = json.loads(path.read_text())
    d["chains"]["1"][2]["transactions"][0]["payload"] = "00"
    path.write_text(json.dumps(d))
    assert cli.main(["verify", "--report", str(path)]) == 1


def test_cli_list(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in bundled_names())


def test_cli_jobs_matches_serial(tmp_path):
    args = ["run", "--scenario", "hotstuff_pipeline", "--no-plots", "--seeds", "2", "--requests", "2"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    for p in sorted((tmp_path / "a").glob("*.report.json")):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_console_entry_point(tmp_path):
    env = dict(os.environ, PYTHONHASHSEED="123")
    res = subprocess.run([sys.executable, "-m", "bftlab.harness.cli", "list"], capture_output=True, text=True, env=env)
    assert res.returncode == 0 and "pbft_failure_free" in res.stdout
