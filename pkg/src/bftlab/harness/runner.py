"""Wire automata, clients and the simulated network together and run one scenario."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .. import codec
from ..client import Completed, Submitted
from ..ledger import chain_to_json
from ..runtime import (
    Broadcast, CancelTimer, Commit, Deliver, Reply, Rollback, Send, SetTimer,
    TimerFire as AutomatonTimer, ViewChangeSignal,
)
from ..simnet import Delivery, Envelope, Network, TimerFire, adversary_transform
from .config import ScenarioConfig, to_dict
from .registry import Deployment, build
from .safety import trim_for, verify_chains

CLIENT_MESSAGES = ("Request", "ClientReply")


def describe(payload) -> tuple[str, Optional[int]]:
    """Message type name and the sequence number it is about (unwrapping instance tags)."""
    inner = getattr(payload, "inner", None)
    if inner is not None:
        return describe(inner)
    seq = getattr(payload, "seq", None)
    if seq is None:
        seq = getattr(payload, "round", None)
    return type(payload).__name__, seq if isinstance(seq, int) else None


@dataclass
class RunReport:
    scenario: dict
    chains: dict
    faulty: list
    verdict: dict
    metrics: dict
    decisions: list
    trace_sha256: str
    trace: Optional[list] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "chains": self.chains,
            "faulty": self.faulty,
            "verdict": self.verdict,
            "metrics": self.metrics,
            "decisions": self.decisions,
            "trace_sha256": self.trace_sha256,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        return cls(d["scenario"], d["chains"], d["faulty"], d["verdict"], d["metrics"],
                   d["decisions"], d["trace_sha256"])

    @property
    def ok(self) -> bool:
        return self.verdict["ok"]


def trace_lines(trace: list) -> str:
    return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in trace)


class Simulation:
    def __init__(self, cfg: ScenarioConfig, deployment: Deployment):
        self.cfg = cfg
        self.dep = deployment
        self.automata: dict = {**deployment.replicas, **deployment.clients}
        self.trace: Optional[list] = [] if cfg.trace else None
        self.net = Network(deployment.network, self.automata, cfg.seed, self.trace)
        self.adversary = deployment.adversary
        self.script_state: dict = {}
        self.sent_by_type: dict[str, int] = {}
        self.sent_by_seq: dict[int, dict[str, int]] = {}
        self.first_send: dict[int, int] = {}
        self.inter_region = 0
        self.commit_time: dict[int, int] = {}
        self.submitted: dict = {}
        self.latencies: list[int] = []
        self.completed: dict = {}
        self.view_changes: dict = {}
        self.rollbacks = 0
        self.reply_sources: dict = {}
        self.clients_done_at: Optional[int] = None
        if deployment.bind is not None:
            deployment.bind(self)

    # -- output handling --
    def _send(self, src, dst, payload) -> None:
        now = self.net.now
        if self.cfg.wire_roundtrip:
            payload = codec.decode_frame(codec.encode_frame(payload))
        env = Envelope(src, dst, payload, now)
        for e in adversary_transform(self.adversary, env, now, self.automata.get(src), self.script_state):
            name, seq = describe(e.payload)
            self.sent_by_type[name] = self.sent_by_type.get(name, 0) + 1
            if seq is not None and name not in CLIENT_MESSAGES:
                per = self.sent_by_seq.setdefault(seq, {})
                per[name] = per.get(name, 0) + 1
                self.first_send.setdefault(seq, now)
            if self.net.model.cross_region(e.src, e.dst):
                self.inter_region += 1
            if name == "ClientReply" or name in self.dep.reply_types:
                self.reply_sources.setdefault(e.dst, set()).add(e.src)
            self.net.schedule_send(e)

    def apply(self, node, outputs) -> None:
        net = self.net
        for o in outputs:
            if isinstance(o, Send):
                self._send(node, o.dst, o.payload)
            elif isinstance(o, Broadcast):
                for dst in o.dsts:
                    self._send(node, dst, o.payload)
            elif isinstance(o, Reply):
                self._send(node, o.client, o.payload)
            elif isinstance(o, SetTimer):
                net.set_timer(node, o.timer_id, o.duration)
            elif isinstance(o, CancelTimer):
                net.cancel_timer(node, o.timer_id)
            elif isinstance(o, Commit):
                if node not in self.adversary.behaviors:
                    self.commit_time.setdefault(o.seq, net.now)
            elif isinstance(o, Submitted):
                self.submitted.setdefault((o.client, o.nonce), net.now)
            elif isinstance(o, Completed):
                key = (o.client, o.nonce)
                if key not in self.completed:
                    self.completed[key] = o
                    self.latencies.append(net.now - self.submitted[key])
            elif isinstance(o, ViewChangeSignal):
                self.view_changes[node] = self.view_changes.get(node, 0) + 1
            elif isinstance(o, Rollback):
                self.rollbacks += 1

    # -- main loop --
    def clients_done(self) -> bool:
        return all(c.inspect().get("done", True) for c in self.dep.clients.values())

    def run(self) -> None:
        cfg = self.cfg
        for node in sorted(self.automata, key=str):
            start = getattr(self.automata[node], "start", None)
            if start is not None:
                self.apply(node, start())
        grace = self.dep.grace
        while True:
            if self.clients_done_at is None and self.dep.clients and self.clients_done():
                self.clients_done_at = self.net.now
            t = self.net.peek_time()
            if t is None or t > cfg.duration:
                break
            if self.clients_done_at is not None and t > self.clients_done_at + grace:
                break
            if self.dep.stop is not None and self.dep.stop(self):
                break
            ev = self.net.step()
            if isinstance(ev, Delivery):
                node = ev.node
                if self.adversary.crashed(node, ev.time):
                    continue
                self.apply(node, self.automata[node].step(Deliver(ev.payload, ev.src)))
            elif isinstance(ev, TimerFire):
                node = ev.node
                if self.adversary.crashed(node, ev.time):
                    continue
                self.apply(node, self.automata[node].step(AutomatonTimer(ev.timer_id)))

    # -- report --
    def report(self) -> RunReport:
        cfg = self.cfg
        dep = self.dep
        chains = {str(r): chain_to_json(dep.chain_of(a)) for r, a in sorted(dep.replicas.items(), key=lambda kv: str(kv[0]))}
        faulty = sorted(str(r) for r in dep.faulty)
        verdict = verify_chains(chains, faulty, trim_for(to_dict(cfg)))
        keys = {(c, nonce) for c, cl in dep.clients.items() for nonce in range(cl.requests)}
        full = 0
        honest = [r for r in dep.replicas if r not in dep.faulty]
        for r in honest:
            have = {tx.key for b in dep.chain_of(dep.replicas[r]).blocks for tx in b.transactions}
            if keys <= have:
                full += 1
        decisions = []
        for seq in sorted(self.sent_by_seq):
            per = self.sent_by_seq[seq]
            row = {"seq": seq, "start": self.first_send[seq], "messages": dict(sorted(per.items())),
                   "total": sum(per.values())}
            if seq in self.commit_time:
                row["latency"] = self.commit_time[seq] - self.first_send[seq]
            decisions.append(row)
        lat = sorted(self.latencies)
        replica_metrics = {str(r): a.inspect().get("metrics", {}) for r, a in sorted(dep.replicas.items(), key=lambda kv: str(kv[0]))}
        client_metrics = {str(c): a.inspect().get("metrics", {}) for c, a in sorted(dep.clients.items())}
        metrics = {
            "requests": len(keys),
            "completed": len(self.completed),
            "committed": min((len(dep.chain_of(dep.replicas[r])) - 1 for r in honest), default=0),
            "replicas_with_all_requests": full,
            "honest_replicas": len(honest),
            "messages_by_type": dict(sorted(self.sent_by_type.items())),
            "messages_total": sum(v for k, v in self.sent_by_type.items() if k not in CLIENT_MESSAGES),
            "inter_region_messages": self.inter_region,
            "latency_mean": (sum(lat) / len(lat)) if lat else None,
            "latency_p50": lat[len(lat) // 2] if lat else None,
            "latency_p99": lat[min(len(lat) - 1, (len(lat) * 99) // 100)] if lat else None,
            "view_changes": max(self.view_changes.values(), default=0),
            "rollbacks": self.rollbacks,
            "end_time": self.net.now,
            "throughput": (len(self.completed) / self.net.now * 1000) if self.net.now else 0.0,
            "completion_paths": _paths(self.completed.values()),
            "reply_sources": {str(c): sorted(str(s) for s in srcs) for c, srcs in sorted(self.reply_sources.items(), key=lambda kv: str(kv[0]))},
            "replica": replica_metrics,
            "client": client_metrics,
        }
        metrics.update(dep.extra_metrics(self))
        sha = hashlib.sha256(trace_lines(self.trace).encode()).hexdigest() if self.trace is not None else ""
        return RunReport(to_dict(cfg), chains, faulty, verdict, metrics, decisions, sha, self.trace)


def _paths(completions) -> dict:
    out: dict[str, int] = {}
    for c in completions:
        out[c.path] = out.get(c.path, 0) + 1
    return dict(sorted(out.items()))


def run_scenario(cfg: ScenarioConfig, keep: Optional[list] = None) -> RunReport:
    """Run ``cfg`` to completion. ``keep``, when given, receives the Simulation for inspection."""
    cfg.validate()
    sim = Simulation(cfg, build(cfg))
    sim.run()
    if keep is not None:
        keep.append(sim)
    return sim.report()
