"""Scenario files: JSON validated against a versioned schema, then turned into a ScenarioConfig."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import jsonschema

from ..runtime import InvalidConfig, QuorumConfig
from ..simnet import (
    AdversarySpec, Constant, Crash, Custom, Delay, Equivocate, Mute, NetworkModel, Partition, Uniform,
)

SCHEMA_VERSION = 1

PERMISSIONED = ("pbft", "zyzzyva", "sbft", "hotstuff", "poe", "rcc", "rbft", "geobft", "bft_pos")
PERMISSIONLESS = ("pow", "pos", "poa")
PROTOCOLS = PERMISSIONED + PERMISSIONLESS


def load_schema() -> dict:
    text = resources.files("bftlab.scenarios").joinpath("schema.json").read_text()
    return json.loads(text)


@dataclass
class ScenarioConfig:
    protocol: str
    n: int = 4
    f: int = 1
    c: int = 0
    z: int = 1
    clusters: tuple[int, ...] = ()
    name: str = ""
    seed: int = 0
    duration: int = 200_000
    clients: int = 1
    requests: int = 10
    batch_size: int = 1
    window: int = 64
    delay: Any = field(default_factory=lambda: Constant(10))
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    partitions: tuple = ()
    inter_region_delay: Any = None
    link_extra: dict = field(default_factory=dict)
    adversary: dict = field(default_factory=dict)
    client_timeout: Optional[int] = None
    dual_sign: bool = False
    expect: str = "ok"
    knobs: dict = field(default_factory=dict)
    trace: bool = True
    wire_roundtrip: bool = False

    @property
    def quorum(self) -> QuorumConfig:
        return QuorumConfig(self.n, self.f, self.c, self.z, tuple(self.clusters))

    @property
    def mean_delay(self) -> float:
        return self.delay.mean

    def regions(self) -> dict:
        if not self.clusters:
            return {int(k): v for k, v in self.knobs.get("regions", {}).items()}
        out, base = {}, 0
        for cid, size in enumerate(self.clusters):
            for r in range(base, base + size):
                out[r] = cid
            base += size
        return out

    def network(self) -> NetworkModel:
        return NetworkModel(self.delay, self.loss_prob, self.dup_prob, tuple(self.partitions),
                            self.regions(), self.inter_region_delay, dict(self.link_extra))

    def adversary_spec(self) -> AdversarySpec:
        return AdversarySpec(dict(self.adversary))

    def faulty_replicas(self) -> list:
        return sorted(r for r in self.adversary if isinstance(r, int))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)

    def validate(self) -> "ScenarioConfig":
        if self.protocol not in PROTOCOLS:
            raise InvalidConfig(f"protocol: unknown protocol {self.protocol!r}")
        if self.n < 1:
            raise InvalidConfig("n: must be positive")
        if self.clients < 0 or self.requests < 0:
            raise InvalidConfig("clients/requests: must be non-negative")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size: must be at least 1")
        if self.protocol in PERMISSIONED:
            if self.clusters:
                if sum(self.clusters) != self.n:
                    raise InvalidConfig(f"clusters: sizes {list(self.clusters)} do not sum to n={self.n}")
                for size in self.clusters:
                    if size < 3 * self.f + 1:
                        raise InvalidConfig(f"clusters: size {size} is below 3f+1 for f={self.f}")
            else:
                self.quorum.check(sbft=self.protocol == "sbft")
            # SBFT additionally tolerates c crashed replicas; GeoBFT bounds faults per cluster
            limit = self.f + self.c if self.protocol == "sbft" else self.f
            if self.protocol == "geobft" and self.clusters:
                limit = self.f * len(self.clusters)
            faulty = self.faulty_replicas()
            if len(faulty) > limit:
                raise InvalidConfig(f"adversary: {len(faulty)} faulty replicas exceed the bound {limit}")
        for r, b in self.adversary.items():
            if isinstance(r, str) and r.startswith("c") and r[1:].isdigit() and int(r[1:]) < self.clients:
                if not isinstance(b, Custom):
                    raise InvalidConfig(f"adversary: client {r} only supports custom scripts")
                continue
            if not isinstance(r, int) or not 0 <= r < self.n:
                raise InvalidConfig(f"adversary: {r!r} is not a replica or client id")
        if self.expect not in ("ok", "violation"):
            raise InvalidConfig("expect: must be 'ok' or 'violation'")
        return self


# --- JSON conversion ------------------------------------------------------------

def _delay(d) -> Any:
    if d is None:
        return None
    if isinstance(d, (int, float)):
        return Constant(int(d))
    if d["kind"] == "constant":
        return Constant(int(d["ticks"]))
    return Uniform(int(d["lo"]), int(d["hi"]))


def _delay_json(d) -> Any:
    if d is None:
        return None
    if isinstance(d, Constant):
        return {"kind": "constant", "ticks": d.ticks}
    return {"kind": "uniform", "lo": d.lo, "hi": d.hi}


def _behavior(b: dict):
    kind = b["kind"]
    if kind == "crash":
        return Crash(int(b.get("at", 0)))
    if kind == "mute":
        return Mute(int(b.get("at", 0)))
    if kind == "equivocate":
        targets = b.get("targets")
        return Equivocate(None if targets is None else tuple(targets), int(b.get("at", 0)))
    if kind == "delay":
        return Delay(int(b["ticks"]))
    return Custom(b["script"], dict(b.get("params", {})))


def _behavior_json(b) -> dict:
    if isinstance(b, Crash):
        return {"kind": "crash", "at": b.at}
    if isinstance(b, Mute):
        return {"kind": "mute", "at": b.at}
    if isinstance(b, Equivocate):
        return {"kind": "equivocate", "at": b.at, "targets": None if b.targets is None else list(b.targets)}
    if isinstance(b, Delay):
        return {"kind": "delay", "ticks": b.ticks}
    return {"kind": "custom", "script": b.script, "params": dict(b.params)}


def from_dict(d: dict) -> ScenarioConfig:
    try:
        jsonschema.validate(d, load_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise InvalidConfig(f"{where}: {e.message}") from None
    net = d.get("network", {})
    cfg = ScenarioConfig(
        protocol=d["protocol"],
        n=d.get("n", 4), f=d.get("f", 1), c=d.get("c", 0), z=d.get("z", 1),
        clusters=tuple(d.get("clusters", ())),
        name=d.get("name", ""), seed=d.get("seed", 0), duration=d.get("duration", 200_000),
        clients=d.get("clients", 1), requests=d.get("requests", 10),
        batch_size=d.get("batch_size", 1), window=d.get("window", 64),
        delay=_delay(net.get("delay", {"kind": "constant", "ticks": 10})),
        loss_prob=net.get("loss_prob", 0.0), dup_prob=net.get("dup_prob", 0.0),
        partitions=tuple(Partition(tuple(frozenset(g) for g in p["groups"]), p.get("start", 0), p.get("end"))
                         for p in net.get("partitions", ())),
        inter_region_delay=_delay(net.get("inter_region_delay")),
        link_extra={(int(e["src"]), int(e["dst"])): int(e["ticks"]) for e in net.get("link_extra", ())},
        adversary={(k if k.startswith("c") else int(k)): _behavior(v) for k, v in d.get("adversary", {}).items()},
        client_timeout=d.get("client_timeout"),
        dual_sign=d.get("dual_sign", False),
        expect=d.get("expect", "ok"),
        knobs=dict(d.get("knobs", {})),
        trace=d.get("trace", True),
        wire_roundtrip=d.get("wire_roundtrip", False),
    )
    return cfg.validate()


def to_dict(cfg: ScenarioConfig) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "name": cfg.name,
        "protocol": cfg.protocol,
        "n": cfg.n, "f": cfg.f, "c": cfg.c, "z": cfg.z,
        "clusters": list(cfg.clusters),
        "seed": cfg.seed, "duration": cfg.duration,
        "clients": cfg.clients, "requests": cfg.requests,
        "batch_size": cfg.batch_size, "window": cfg.window,
        "network": {
            "delay": _delay_json(cfg.delay),
            "loss_prob": cfg.loss_prob, "dup_prob": cfg.dup_prob,
            "partitions": [{"groups": [sorted(g, key=str) for g in p.groups], "start": p.start, "end": p.end}
                           for p in cfg.partitions],
            "inter_region_delay": _delay_json(cfg.inter_region_delay),
            "link_extra": [{"src": s, "dst": t, "ticks": k} for (s, t), k in sorted(cfg.link_extra.items())],
        },
        "adversary": {str(k): _behavior_json(v) for k, v in sorted(cfg.adversary.items(), key=lambda kv: str(kv[0]))},
        "client_timeout": cfg.client_timeout,
        "dual_sign": cfg.dual_sign,
        "expect": cfg.expect,
        "knobs": cfg.knobs,
        "trace": cfg.trace,
        "wire_roundtrip": cfg.wire_roundtrip,
    }


def load(path, overrides: Optional[dict] = None) -> ScenarioConfig:
    d = json.loads(Path(path).read_text())
    if overrides:
        d.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(d)


def bundled(name: str) -> ScenarioConfig:
    text = resources.files("bftlab.scenarios").joinpath(f"{name}.json").read_text()
    return from_dict(json.loads(text))


def bundled_names() -> list[str]:
    root = resources.files("bftlab.scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json") and p.name != "schema.json")
