"""Pieces shared by every replica automaton: context, client-facing messages, execution."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

from .. import codec
from ..codec import frame
from ..crypto import MAC, SIGNATURE, Authenticator, Keyring, ThresholdGroup
from ..ledger import ChainBuilder, Transaction, batch_digest
from ..runtime import (
    Automaton, Broadcast, CancelTimer, Commit, Metrics, Reply, Rollback, Send, SetTimer,
)
from ..statemachine import KVStore

NO_AUTH = Authenticator("", b"", "")


class UndoUnavailable(RuntimeError):
    """A rollback reached a block without an undo record. Always a bug."""


@frame(1)
@dataclass(frozen=True)
class Request:
    tx: Transaction


@frame(2)
@dataclass(frozen=True)
class ClientReply:
    view: int
    seq: int
    client: str
    nonce: int
    result: bytes
    replica: int
    auth: Authenticator


@frame(5)
@dataclass(frozen=True)
class Fetch:
    seq: int
    digest: bytes


@frame(6)
@dataclass(frozen=True)
class FetchReply:
    seq: int
    digest: bytes
    batch: tuple[Transaction, ...]


def reply_bytes(domain: str, client: str, nonce: int, result: bytes) -> bytes:
    return codec.pack(domain, "reply", client, nonce, result)


def signed_body(domain: str, msg) -> bytes:
    """Bytes covered by a message's own ``auth`` field: the message with that field blanked."""
    return domain.encode() + codec.encode(replace(msg, auth=NO_AUTH))


@dataclass
class ProtocolContext:
    keyring: Keyring
    members: tuple
    f: int
    c: int = 0
    clients: frozenset = frozenset()
    mean_delay: float = 10.0
    batch_size: int = 1
    window: int = 64
    domain: str = "bft"
    request_timeout_factor: float = 20.0
    dual_sign: bool = False
    leader: Optional[Callable[[int], Any]] = None
    knobs: dict = field(default_factory=dict)

    def group(self, t: int, label: str = "") -> ThresholdGroup:
        return ThresholdGroup(self.keyring, self.members, t, (self.domain + label).encode())


class Replica(Automaton):
    """Base for every replica automaton: output buffer, signing, execution, ledger."""

    def __init__(self, node_id, ctx: ProtocolContext, *, execute: bool = True):
        self.node_id = node_id
        self.ctx = ctx
        self.members = tuple(ctx.members)
        self.others = tuple(m for m in self.members if m != node_id)
        self.n = len(self.members)
        self.f = ctx.f
        self.domain = ctx.domain
        self.keyring = ctx.keyring
        self.name = str(node_id)
        self.execute_enabled = execute
        self.metrics = Metrics()
        self.store = KVStore()
        self.chain = ChainBuilder()
        self.results: dict = {}
        self.undo: dict[int, list] = {}
        self._out: list = []

    # -- plumbing --
    def step(self, inp) -> list:
        self._out = []
        self.dispatch(inp)
        out, self._out = self._out, []
        return out

    def dispatch(self, inp):
        raise NotImplementedError

    def emit(self, output) -> None:
        self._out.append(output)

    def send(self, dst, msg) -> None:
        if dst == self.node_id:
            self.handle(msg, self.node_id)
        else:
            self._out.append(Send(dst, msg))

    def broadcast(self, msg, dsts=None) -> None:
        dsts = self.others if dsts is None else tuple(d for d in dsts if d != self.node_id)
        if dsts:
            self._out.append(Broadcast(msg, dsts))

    def set_timer(self, tid, duration) -> None:
        self._out.append(SetTimer(tid, max(1, int(duration))))

    def cancel_timer(self, tid) -> None:
        self._out.append(CancelTimer(tid))

    def handle(self, msg, src) -> None:
        raise NotImplementedError

    # -- crypto helpers --
    def sign(self, data: bytes, kind: str = SIGNATURE) -> Authenticator:
        return self.keyring.sign(self.name, data, kind)

    def verify(self, who, data: bytes, auth: Authenticator) -> bool:
        return auth.signer == str(who) and self.keyring.verify_from(who, data, auth)

    def tx_valid(self, tx: Transaction) -> bool:
        if not tx.client_auth:
            return False
        body = tx.signing_bytes()
        kinds = set()
        for a in tx.client_auth:
            if a.signer != tx.client_id or not self.keyring.verify_from(tx.client_id, body, a):
                return False
            kinds.add(a.kind)
        if self.ctx.dual_sign and kinds != {SIGNATURE, MAC}:
            return False
        return True

    def batch_valid(self, digest: bytes, batch) -> bool:
        if batch_digest(batch) != digest:
            return False
        return all(self.tx_valid(tx) for tx in batch)

    # -- execution --
    def reply(self, view: int, seq: int, tx: Transaction, result: bytes) -> None:
        if tx.client_id not in self.ctx.clients:
            return
        auth = self.sign(reply_bytes(self.domain, tx.client_id, tx.nonce, result), MAC)
        self._out.append(Reply(tx.client_id, ClientReply(view, seq, tx.client_id, tx.nonce, result, self.node_id, auth)))

    def apply_batch(self, batch, proposer=None, view: int = 0, certificate: bytes = b"", reply: bool = True) -> tuple:
        """Execute a batch, append it to the ledger and emit Commit. Returns the results."""
        block = self.chain.make_block(batch, proposer, view, certificate)
        results = []
        records = []
        for tx in batch:
            key = tx.key
            if key in self.results:
                results.append(self.results[key])
                records.append((key, None, False))
                continue
            res, rec = self.store.apply(tx.payload)
            self.results[key] = res
            results.append(res)
            records.append((key, rec, True))
        self.chain.append(block)
        self.undo[block.number] = records
        self.emit(Commit(block.number, block))
        if reply:
            for tx, res in zip(batch, results):
                self.reply(view, block.number, tx, res)
        self.metrics.bump("executed_blocks")
        return tuple(results)

    def rollback_to(self, keep_upto: int) -> list:
        """Undo every executed block above ``keep_upto``; returns their transactions."""
        undone = []
        for number in range(len(self.chain) - 1, keep_upto, -1):
            records = self.undo.pop(number, None)
            if records is None:
                raise UndoUnavailable(f"replica {self.node_id} has no undo record for block {number}")
            for key, rec, fresh in reversed(records):
                if fresh:
                    self.store.undo(rec)
                    self.results.pop(key, None)
            undone.extend(self.chain.blocks[number].transactions)
        if len(self.chain) - 1 > keep_upto:
            self.chain.truncate(keep_upto + 1)
            self.emit(Rollback(keep_upto))
            self.metrics.bump("rollbacks")
        return undone

    def inspect(self) -> dict:
        return {
            "node": self.node_id,
            "height": len(self.chain) - 1,
            "tip": self.chain.tip_digest.hex(),
            "metrics": dict(self.metrics.counters),
        }
