"""Automaton contract and the quorum arithmetic every permissioned protocol shares."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Hashable, Optional

from .ledger import Block, Transaction


class InvalidConfig(ValueError):
    pass


class Q(enum.Enum):
    PREPARE = "PrepareQ"
    COMMIT = "CommitQ"
    VIEW_CHANGE = "ViewChangeQ"
    CLIENT_REPLY = "ClientReplyQ"
    SPEC_CLIENT = "SpecClientQ"
    POE_CLIENT = "PoeClientQ"
    SBFT_FAST = "SbftFastQ"
    SBFT_EXEC = "SbftExecQ"
    HOTSTUFF = "HotstuffQ"


@dataclass(frozen=True)
class QuorumConfig:
    n: int
    f: int
    c: int = 0
    z: int = 1
    clusters: tuple[int, ...] = ()

    def check(self, sbft: bool = False) -> "QuorumConfig":
        if self.f < 0 or self.c < 0:
            raise InvalidConfig("f and c must be non-negative")
        if self.z < 1:
            raise InvalidConfig("z must be at least 1")
        if self.n < 3 * self.f + 1:
            raise InvalidConfig(f"n={self.n} violates n >= 3f+1 for f={self.f}")
        if sbft and self.n < 3 * self.f + 2 * self.c + 1:
            raise InvalidConfig(f"n={self.n} violates n >= 3f+2c+1 for f={self.f}, c={self.c}")
        if self.z > self.n:
            raise InvalidConfig("z instances need z distinct primaries")
        return self


def quorum(config: QuorumConfig, kind: Q) -> int:
    config.check(sbft=kind is Q.SBFT_FAST)
    f, c = config.f, config.c
    return {
        Q.PREPARE: 2 * f,
        Q.COMMIT: 2 * f + 1,
        Q.VIEW_CHANGE: 2 * f + 1,
        Q.CLIENT_REPLY: f + 1,
        Q.SPEC_CLIENT: 3 * f + 1,
        Q.POE_CLIENT: 2 * f + 1,
        Q.SBFT_FAST: 3 * f + 2 * c + 1,
        Q.SBFT_EXEC: f + 1,
        Q.HOTSTUFF: 2 * f + 1,
    }[kind]


def primary_of(view: int, n: int) -> int:
    if n < 1:
        raise InvalidConfig("n must be positive")
    return view % n


def max_faults(n: int) -> int:
    return (n - 1) // 3


# --- automaton inputs ---------------------------------------------------------

@dataclass(frozen=True)
class Deliver:
    payload: Any
    src: Any


@dataclass(frozen=True)
class TimerFire:
    timer_id: Hashable


@dataclass(frozen=True)
class ClientRequest:
    tx: Transaction


# --- automaton outputs --------------------------------------------------------

@dataclass(frozen=True)
class Send:
    dst: Any
    payload: Any


@dataclass(frozen=True)
class Broadcast:
    payload: Any
    dsts: tuple


@dataclass(frozen=True)
class Commit:
    seq: int
    block: Block


@dataclass(frozen=True)
class Reply:
    client: Any
    payload: Any


@dataclass(frozen=True)
class SetTimer:
    timer_id: Hashable
    duration: int


@dataclass(frozen=True)
class CancelTimer:
    timer_id: Hashable


@dataclass(frozen=True)
class ViewChangeSignal:
    new_view: int


@dataclass(frozen=True)
class Rollback:
    """Ledger truncation: every block numbered above ``keep_upto`` is discarded."""

    keep_upto: int


class Automaton:
    """Deterministic protocol state machine. Never reads clocks or global randomness."""

    node_id: Any = None

    def step(self, inp) -> list:
        raise NotImplementedError

    def inspect(self) -> dict:
        return {}

    def equivocate(self, payload) -> Optional[Any]:
        """Alternative payload a Byzantine instance of this automaton would send instead."""
        return None


@dataclass
class Metrics:
    counters: dict = field(default_factory=dict)

    def bump(self, name: str, by: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + by
