"""Deterministic discrete-event network.

One priority queue holds both message deliveries and timer fires; ties are
broken by insertion order, so a run is a pure function of its configuration
and seed. Randomness comes from :class:`random.Random` (MT19937) seeded with
a string, whose seeding is stable across processes and platforms.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Hashable, Iterable, Optional, Union

from . import codec

NodeId = Union[int, str]


class SimError(ValueError):
    pass


class UnknownNode(SimError):
    pass


# --- network model ------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    ticks: int

    def draw(self, rng: random.Random) -> int:
        return self.ticks

    @property
    def mean(self) -> float:
        return float(self.ticks)


@dataclass(frozen=True)
class Uniform:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi or self.lo < 0:
            raise SimError(f"bad uniform delay range [{self.lo}, {self.hi}]")

    def draw(self, rng: random.Random) -> int:
        return rng.randint(self.lo, self.hi)

    @property
    def mean(self) -> float:
        return (self.lo + self.hi) / 2


@dataclass(frozen=True)
class Partition:
    groups: tuple[frozenset, ...]
    start: int = 0
    end: Optional[int] = None

    def active(self, t: int) -> bool:
        return t >= self.start and (self.end is None or t < self.end)

    def separates(self, a, b) -> bool:
        ga = gb = None
        for i, g in enumerate(self.groups):
            if a in g:
                ga = i
            if b in g:
                gb = i
        return ga != gb


@dataclass(frozen=True)
class NetworkModel:
    delay: Union[Constant, Uniform] = Constant(10)
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    partitions: tuple[Partition, ...] = ()
    regions: dict = field(default_factory=dict)
    inter_region_delay: Optional[Union[Constant, Uniform]] = None
    link_extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("loss_prob", "dup_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise SimError(f"{name} must lie in [0, 1], got {p}")

    @property
    def mean_delay(self) -> float:
        return self.delay.mean

    def cross_region(self, a, b) -> bool:
        # unlabeled nodes (clients) count as local to everyone
        ra, rb = self.regions.get(a), self.regions.get(b)
        return ra is not None and rb is not None and ra != rb


# --- adversary ----------------------------------------------------------------

@dataclass(frozen=True)
class Crash:
    at: int = 0


@dataclass(frozen=True)
class Mute:
    at: int = 0


@dataclass(frozen=True)
class Equivocate:
    targets: Optional[tuple] = None
    at: int = 0


@dataclass(frozen=True)
class Delay:
    ticks: int


@dataclass(frozen=True)
class Custom:
    script: str
    params: dict = field(default_factory=dict)


Behavior = Union[Crash, Mute, Equivocate, Delay, Custom]


@dataclass
class AdversarySpec:
    behaviors: dict = field(default_factory=dict)

    @property
    def byzantine(self) -> frozenset:
        return frozenset(self.behaviors)

    def crashed(self, node, now: int) -> bool:
        b = self.behaviors.get(node)
        return isinstance(b, Crash) and now >= b.at


@dataclass
class ScriptContext:
    """What a custom adversary script may touch: the Byzantine node's own automaton and keys."""

    node: Any
    now: int
    params: dict
    state: dict
    automaton: Any


#: name -> fn(envelope, ScriptContext) -> list of envelopes
SCRIPTS: dict[str, Callable[["Envelope", ScriptContext], list]] = {}


def script(name: str):
    def register(fn):
        SCRIPTS[name] = fn
        return fn

    return register


@dataclass
class Envelope:
    src: Any
    dst: Any
    payload: Any
    send_time: int
    deliver_time: int = -1
    extra_delay: int = 0

    @property
    def kind(self) -> str:
        return type(self.payload).__name__


def adversary_transform(spec: AdversarySpec, env: Envelope, now: int, automaton=None, script_state=None) -> list[Envelope]:
    """Apply the sender's Byzantine behaviour to an outgoing envelope."""
    b = spec.behaviors.get(env.src)
    if b is None:
        return [env]
    if isinstance(b, (Crash, Mute)):
        return [] if now >= b.at else [env]
    if isinstance(b, Delay):
        return [replace(env, extra_delay=env.extra_delay + b.ticks)]
    if isinstance(b, Equivocate):
        if now < b.at or automaton is None or b.targets is None or env.dst not in b.targets:
            return [env]
        alt = automaton.equivocate(env.payload)
        return [env if alt is None else replace(env, payload=alt)]
    if isinstance(b, Custom):
        fn = SCRIPTS.get(b.script)
        if fn is None:
            raise SimError(f"unknown adversary script {b.script!r}")
        state = script_state.setdefault(env.src, {}) if script_state is not None else {}
        return list(fn(env, ScriptContext(env.src, now, b.params, state, automaton)))
    raise SimError(f"unknown behaviour {b!r}")


# --- event loop ---------------------------------------------------------------

@dataclass(frozen=True)
class Delivery:
    node: Any
    src: Any
    payload: Any
    time: int


@dataclass(frozen=True)
class TimerFire:
    node: Any
    timer_id: Hashable
    time: int


class Idle:
    def __repr__(self):
        return "Idle"


IDLE = Idle()


def digest_prefix(payload) -> str:
    try:
        return codec.sha3(codec.encode_frame(payload))[:4].hex()
    except (AttributeError, TypeError):
        return ""


class Network:
    """Event queue plus the link model. Adversary handling is left to the caller."""

    def __init__(self, model: NetworkModel, nodes: Iterable, seed: int | str = 0, trace: Optional[list] = None):
        self.model = model
        self.nodes = set(nodes)
        self.rng = random.Random(f"simnet:{seed}")
        self.now = 0
        self._queue: list = []
        self._counter = 0
        self._timer_gen: dict = {}
        self.trace = trace

    def _push(self, t: int, event) -> None:
        heapq.heappush(self._queue, (t, self._counter, event))
        self._counter += 1

    def _record(self, kind, env: Envelope, t: int) -> None:
        if self.trace is not None:
            self.trace.append({
                "t": t, "kind": kind, "src": env.src, "dst": env.dst,
                "type": env.kind, "digest": digest_prefix(env.payload),
            })

    def _delay_for(self, src, dst):
        m = self.model
        if m.inter_region_delay is not None and m.cross_region(src, dst):
            return m.inter_region_delay
        return m.delay

    def schedule_send(self, env: Envelope) -> list[Envelope]:
        if env.src not in self.nodes or env.dst not in self.nodes:
            raise UnknownNode(f"unknown endpoint in {env.src!r} -> {env.dst!r}")
        m = self.model
        for p in m.partitions:
            if p.active(env.send_time) and p.separates(env.src, env.dst):
                self._record("drop", env, env.send_time)
                return []
        if m.loss_prob >= 1 or (m.loss_prob > 0 and self.rng.random() < m.loss_prob):
            self._record("drop", env, env.send_time)
            return []
        copies = 2 if m.dup_prob >= 1 or (m.dup_prob > 0 and self.rng.random() < m.dup_prob) else 1
        base = env.extra_delay + m.link_extra.get((env.src, env.dst), 0)
        delay = self._delay_for(env.src, env.dst)
        out = []
        for _ in range(copies):
            e = replace(env, deliver_time=env.send_time + base + delay.draw(self.rng))
            self._push(e.deliver_time, e)
            self._record("send", e, env.send_time)
            out.append(e)
        return out

    def set_timer(self, node, timer_id, duration: int) -> None:
        gen = self._timer_gen.get((node, timer_id), 0) + 1
        self._timer_gen[(node, timer_id)] = gen
        self._push(self.now + max(0, int(duration)), ("timer", node, timer_id, gen))

    def cancel_timer(self, node, timer_id) -> None:
        key = (node, timer_id)
        if key in self._timer_gen:
            self._timer_gen[key] += 1

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def step(self):
        while self._queue:
            t, _, ev = heapq.heappop(self._queue)
            self.now = t
            if isinstance(ev, Envelope):
                self._record("deliver", ev, t)
                return Delivery(ev.dst, ev.src, ev.payload, t)
            _, node, timer_id, gen = ev
            if self._timer_gen.get((node, timer_id)) == gen:
                del self._timer_gen[(node, timer_id)]
                if self.trace is not None:
                    self.trace.append({"t": t, "kind": "timer", "src": node, "dst": node,
                                       "type": str(timer_id), "digest": ""})
                return TimerFire(node, timer_id, t)
        return IDLE


def schedule_send(net: Network, env: Envelope) -> list[Envelope]:
    return net.schedule_send(env)


def step(net: Network):
    return net.step()
