"""Command line: ``run``, ``verify``, ``compare`` and ``list``.

Exit codes: 0 when every run is safe, 2 when a safety violation was found, 1 on errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ..runtime import InvalidConfig
from . import config as scenario_config
from .metrics import emit_metrics
from .runner import RunReport, run_scenario, trace_lines
from .safety import verdict_dict, verify_safety

log = logging.getLogger("bftlab")

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2

OVERRIDES = ("n", "f", "c", "z", "clients", "requests", "duration", "batch_size")


def load_scenario(ref: str, overrides: dict) -> scenario_config.ScenarioConfig:
    """``ref`` is a path to a scenario file or the name of a bundled scenario."""
    path = Path(ref)
    if path.exists():
        return scenario_config.load(path, overrides)
    if ref in scenario_config.bundled_names():
        d = scenario_config.to_dict(scenario_config.bundled(ref))
        d.update({k: v for k, v in overrides.items() if v is not None})
        return scenario_config.from_dict(d)
    raise InvalidConfig(f"scenario: no file or bundled scenario named {ref!r}")


def _run_one(cfg_dict: dict, out: str, plots: bool) -> dict:
    cfg = scenario_config.from_dict(cfg_dict)
    report = run_scenario(cfg)
    stem = Path(out) / f"{cfg.name or cfg.protocol}-seed{cfg.seed}"
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_name(stem.name + ".report.json").write_text(report.to_json() + "\n")
    if report.trace is not None:
        stem.with_name(stem.name + ".trace.jsonl").write_text(trace_lines(report.trace))
    csv_path, _ = emit_metrics(report, stem)
    if plots:
        from .plotting import render

        render(report, stem)
    return {"seed": cfg.seed, "verdict": report.verdict, "expect": cfg.expect, "csv": str(csv_path),
            "completed": report.metrics["completed"], "requests": report.metrics["requests"]}


def cmd_run(args) -> int:
    overrides = {k: getattr(args, k) for k in OVERRIDES}
    overrides["seed"] = args.seed
    cfg = load_scenario(args.scenario, overrides)
    base = scenario_config.to_dict(cfg)
    jobs = []
    for i in range(args.seeds):
        d = dict(base)
        d["seed"] = cfg.seed + i
        jobs.append(d)
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, jobs, [args.out] * len(jobs), [not args.no_plots] * len(jobs)))
    else:
        results = [_run_one(d, args.out, not args.no_plots) for d in jobs]
    violated = False
    for r in results:
        status = "ok" if r["verdict"]["ok"] else "VIOLATION"
        note = " (expected)" if not r["verdict"]["ok"] and r["expect"] == "violation" else ""
        print(f"seed {r['seed']}: {status}{note}  completed {r['completed']}/{r['requests']}  -> {r['csv']}")
        violated |= not r["verdict"]["ok"]
    return EXIT_VIOLATION if violated else EXIT_OK


def read_report(path) -> RunReport:
    return RunReport.from_json(Path(path).read_text())


def cmd_verify(args) -> int:
    report = read_report(args.report)
    verdict = verdict_dict(verify_safety(report))
    if verdict != report.verdict:
        print(f"stored verdict {report.verdict} disagrees with recomputed {verdict}")
        return EXIT_ERROR
    print(json.dumps(verdict, sort_keys=True))
    return EXIT_OK if verdict["ok"] else EXIT_VIOLATION


def metric_value(report: RunReport, metric: str):
    m = report.metrics
    if metric == "messages":
        return m["messages_total"]
    if metric == "latency":
        return m["latency_mean"]
    return m["throughput"]


def cmd_compare(args) -> int:
    rows = []
    for p in args.reports:
        r = read_report(p)
        rows.append((p, r.scenario.get("protocol", ""), r.scenario.get("seed"), metric_value(r, args.metric)))
    width = max(len(str(r[0])) for r in rows)
    print(f"{'report':<{width}}  protocol  seed  {args.metric}")
    for path, proto, seed, value in rows:
        shown = "n/a" if value is None else (f"{value:.3f}" if isinstance(value, float) else str(value))
        print(f"{path:<{width}}  {proto:<8}  {seed!s:<4}  {shown}")
    vals = [r[3] for r in rows]
    if len(vals) == 2 and all(isinstance(v, (int, float)) for v in vals) and vals[0]:
        print(f"ratio {Path(rows[1][0]).name} / {Path(rows[0][0]).name}: {vals[1] / vals[0]:.3f}")
    return EXIT_OK


def cmd_list(args) -> int:
    for name in scenario_config.bundled_names():
        cfg = scenario_config.bundled(name)
        print(f"{name:<32} {cfg.protocol:<8} n={cfg.n} expect={cfg.expect}")
    return EXIT_OK


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bftlab", description="Simulate and check BFT and Nakamoto-style protocols.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write report, trace, metrics and figures")
    run.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    run.add_argument("--seed", type=int)
    run.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")
    run.add_argument("--out", default="out")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--no-plots", action="store_true")
    for k in OVERRIDES:
        run.add_argument(f"--{k.replace('_', '-')}", dest=k, type=int)
    run.set_defaults(fn=cmd_run)

    ver = sub.add_parser("verify", help="recompute the safety verdict of a stored report")
    ver.add_argument("--report", required=True)
    ver.set_defaults(fn=cmd_verify)

    cmp_ = sub.add_parser("compare", help="compare one metric across reports")
    cmp_.add_argument("--reports", nargs="+", required=True)
    cmp_.add_argument("--metric", choices=("messages", "latency", "throughput"), default="messages")
    cmp_.set_defaults(fn=cmd_compare)

    ls = sub.add_parser("list", help="list bundled scenarios")
    ls.set_defaults(fn=cmd_list)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (InvalidConfig, OSError, ValueError, KeyError) as e:
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
