"""Per-decision CSV and a JSON summary for one run."""

from __future__ import annotations

import csv
import json
from pathlib import Path

BASE_COLUMNS = ["protocol", "seq"]
TAIL_COLUMNS = ["total", "latency"]


def message_types(report) -> list[str]:
    return sorted({t for row in report.decisions for t in row["messages"]})


def decision_rows(report) -> list[dict]:
    protocol = report.scenario.get("protocol", "")
    types = message_types(report)
    rows = []
    for d in report.decisions:
        row = {"protocol": protocol, "seq": d["seq"]}
        for t in types:
            row[t] = d["messages"].get(t, 0)
        row["total"] = d["total"]
        row["latency"] = d.get("latency", "")
        rows.append(row)
    return rows


def summary(report) -> dict:
    m = report.metrics
    keys = ("requests", "completed", "committed", "messages_total", "messages_by_type", "inter_region_messages",
            "latency_mean", "latency_p50", "latency_p99", "view_changes", "rollbacks", "throughput",
            "end_time", "fork_rate", "completion_paths")
    out = {"scenario": report.scenario.get("name", ""), "protocol": report.scenario.get("protocol", ""),
           "seed": report.scenario.get("seed"), "verdict": report.verdict, "trace_sha256": report.trace_sha256}
    out.update({k: m[k] for k in keys if k in m})
    return out


def emit_metrics(report, path) -> tuple[Path, Path]:
    """Write a CSV with one row per decision and a JSON summary beside it. Returns both paths."""
    path = Path(path)
    csv_path = path if path.suffix == ".csv" else path.with_name(path.name + ".csv")
    json_path = csv_path.with_suffix(".json")
    columns = BASE_COLUMNS + message_types(report) + TAIL_COLUMNS
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(decision_rows(report))
    json_path.write_text(json.dumps(summary(report), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
