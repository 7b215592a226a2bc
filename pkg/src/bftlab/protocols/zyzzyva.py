"""Zyzzyva: the primary orders, replicas execute speculatively and answer the client directly.

Fast path: the client completes on ``3f+1`` matching speculative responses.
Slow path: on timeout with ``2f+1`` matching responses the client sends them
back as a commit certificate and completes on ``2f+1`` local-commit acks.
Conflicting histories are forwarded as a misbehaviour proof, which only
raises a view-change signal: there is no view-change machinery, so a faulty
primary can leave correct replicas with diverging histories.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .. import codec
from ..client import Client
from ..codec import frame
from ..crypto import Authenticator
from ..ledger import ZERO_DIGEST, Transaction, batch_digest
from ..runtime import Broadcast, ClientRequest, Deliver, SetTimer, ViewChangeSignal
from ..simnet import script
from .common import NO_AUTH, ProtocolContext, Replica, Request, signed_body


@frame(40)
@dataclass(frozen=True)
class OrderReq:
    view: int
    seq: int
    digest: bytes
    history: bytes
    batch: tuple[Transaction, ...]
    auth: Authenticator


@frame(41)
@dataclass(frozen=True)
class SpecResponse:
    view: int
    seq: int
    client: str
    nonce: int
    result: bytes
    history: bytes
    replica: int
    auth: Authenticator

    def match_key(self) -> tuple:
        return (self.view, self.seq, self.client, self.nonce, self.result, self.history)


@frame(42)
@dataclass(frozen=True)
class CommitCertificate:
    client: str
    nonce: int
    seq: int
    history: bytes
    responses: tuple[SpecResponse, ...]


@frame(43)
@dataclass(frozen=True)
class LocalCommit:
    view: int
    seq: int
    client: str
    nonce: int
    replica: int
    auth: Authenticator


@frame(44)
@dataclass(frozen=True)
class Misbehavior:
    seq: int
    responses: tuple[SpecResponse, ...]


def extend_history(prev: bytes, digest: bytes) -> bytes:
    return codec.sha3(prev, digest)


class Zyzzyva(Replica):
    def __init__(self, node_id, ctx: ProtocolContext, **kw):
        super().__init__(node_id, ctx, **kw)
        self.view = 0
        self.next_seq = 1
        self.history = [ZERO_DIGEST]
        self.pending: dict[int, OrderReq] = {}
        self.assigned: set = set()
        self.responses: dict = {}
        self.max_commit = 0
        self.suspected = False
        self.forged: dict[int, OrderReq] = {}
        self.handlers = {
            Request: self.on_request_msg,
            OrderReq: self.on_order_req,
            CommitCertificate: self.on_commit_certificate,
            Misbehavior: self.on_misbehavior,
        }

    def primary(self):
        return self.members[self.view % self.n]

    def order_bytes(self, view, seq, digest, history) -> bytes:
        return codec.pack(self.domain, "order", view, seq, digest, history)

    def dispatch(self, inp):
        if isinstance(inp, Deliver):
            self.handle(inp.payload, inp.src)
        elif isinstance(inp, ClientRequest):
            self.on_request(inp.tx, None)

    def handle(self, msg, src) -> None:
        h = self.handlers.get(type(msg))
        if h is None:
            self.metrics.bump("dropped_unknown")
            return
        h(msg, src)

    # -- ordering --
    def on_request_msg(self, m: Request, src) -> None:
        self.on_request(m.tx, src)

    def on_request(self, tx: Transaction, src) -> None:
        if not self.tx_valid(tx):
            self.metrics.bump("bad_client_auth")
            return
        cached = self.responses.get(tx.key)
        if cached is not None:
            if isinstance(src, str):
                self.emit_response(cached)
            return
        if self.primary() != self.node_id:
            if isinstance(src, str):
                self.send(self.primary(), Request(tx))
            return
        if tx.key in self.assigned:
            return
        self.assigned.add(tx.key)
        batch = (tx,)
        seq = self.next_seq
        self.next_seq += 1
        d = batch_digest(batch)
        h = extend_history(self.history[-1], d)
        m = OrderReq(self.view, seq, d, h, batch, self.sign(self.order_bytes(self.view, seq, d, h)))
        self.broadcast(m)
        self.execute(m)

    def on_order_req(self, m: OrderReq, src) -> None:
        if src != self.primary() or m.view != self.view:
            self.metrics.bump("dropped_not_primary")
            return
        if not self.verify(src, self.order_bytes(m.view, m.seq, m.digest, m.history), m.auth):
            self.metrics.bump("dropped_invalid")
            return
        if not self.batch_valid(m.digest, m.batch):
            self.metrics.bump("dropped_invalid")
            return
        if m.seq < len(self.history) or m.seq in self.pending:
            return
        self.pending[m.seq] = m
        while len(self.history) in self.pending:
            nxt = self.pending.pop(len(self.history))
            if extend_history(self.history[-1], nxt.digest) != nxt.history:
                self.metrics.bump("history_mismatch")
                self.pending.clear()
                return
            self.execute(nxt)

    def execute(self, m: OrderReq) -> None:
        self.history.append(m.history)
        results = self.apply_batch(m.batch, self.primary(), m.view, reply=False)
        for tx, res in zip(m.batch, results):
            r = SpecResponse(m.view, m.seq, tx.client_id, tx.nonce, res, m.history, self.node_id, NO_AUTH)
            r = replace(r, auth=self.sign(signed_body(self.domain, r)))
            self.responses[tx.key] = r
            self.emit_response(r)

    def emit_response(self, r: SpecResponse) -> None:
        if r.client in self.ctx.clients:
            self.send(r.client, r)

    def equivocate(self, payload):
        """Alternative order stream with forged batches and a self-consistent forged history."""
        if not isinstance(payload, OrderReq):
            return None
        forge = self.ctx.knobs.get("forge")
        if forge is None:
            return None
        alt = self.forged.get(payload.seq)
        if alt is None:
            prev = self.forged.get(payload.seq - 1)
            prev_h = prev.history if prev is not None else self.history[payload.seq - 1]
            batch = (forge(self.node_id, payload.seq),)
            d = batch_digest(batch)
            h = extend_history(prev_h, d)
            alt = OrderReq(payload.view, payload.seq, d, h, batch, self.sign(self.order_bytes(payload.view, payload.seq, d, h)))
            self.forged[payload.seq] = alt
        return alt

    # -- slow path --
    def response_valid(self, r: SpecResponse) -> bool:
        return r.replica in self.members and self.verify(r.replica, signed_body(self.domain, r), r.auth)

    def on_commit_certificate(self, m: CommitCertificate, src) -> None:
        if src != m.client:
            return
        keys = {r.match_key() for r in m.responses}
        signers = {r.replica for r in m.responses if self.response_valid(r)}
        if len(keys) != 1 or len(signers) < 2 * self.f + 1:
            self.metrics.bump("dropped_invalid")
            return
        if m.seq >= len(self.history) or self.history[m.seq] != m.history:
            self.metrics.bump("certificate_history_mismatch")
            return
        self.max_commit = max(self.max_commit, m.seq)
        ack = LocalCommit(self.view, m.seq, m.client, m.nonce, self.node_id, NO_AUTH)
        ack = replace(ack, auth=self.sign(signed_body(self.domain, ack)))
        self.send(m.client, ack)

    def on_misbehavior(self, m: Misbehavior, src) -> None:
        valid = [r for r in m.responses if self.response_valid(r) and r.seq == m.seq]
        if len({r.history for r in valid}) < 2:
            return
        self.metrics.bump("misbehavior_proofs")
        if not self.suspected:
            self.suspected = True
            self.emit(ViewChangeSignal(self.view + 1))

    def inspect(self) -> dict:
        d = super().inspect()
        d.update(view=self.view, history=self.history[-1].hex(), max_commit=self.max_commit)
        return d


class ZyzzyvaClient(Client):
    """Fast path at 3f+1 matching responses; commit certificate at 2f+1 on timeout."""

    def __init__(self, name, keyring, replicas, need, *, f: int = 1, **kw):
        super().__init__(name, keyring, replicas, need, **kw)
        self.f = f
        self.cert_sent = None
        self.acks: set = set()
        self.spec: dict = {}

    def submit(self, tx) -> None:
        self.spec = {}
        self.acks = set()
        self.cert_sent = None
        super().submit(tx)

    def on_message(self, m, src) -> None:
        if isinstance(m, SpecResponse):
            self.on_spec_response(m, src)
        elif isinstance(m, LocalCommit):
            self.on_local_commit(m, src)
        else:
            super().on_message(m, src)

    def signed_ok(self, m, src) -> bool:
        return (m.replica == src and src in self.replicas
                and self.keyring.verify_from(src, signed_body(self.domain, m), m.auth))

    def on_spec_response(self, m: SpecResponse, src) -> None:
        st = self.state
        if st.pending is None or m.nonce != st.pending.nonce or m.client != self.node_id:
            return
        if not self.signed_ok(m, src):
            self.metrics.bump("bad_reply_auth")
            return
        group = self.spec.setdefault(m.match_key(), {})
        group[src] = m
        if len(group) >= 3 * self.f + 1:
            self.complete(m.result, "fast")

    def on_local_commit(self, m: LocalCommit, src) -> None:
        st = self.state
        if st.pending is None or self.cert_sent is None or m.nonce != st.pending.nonce:
            return
        if not self.signed_ok(m, src) or m.seq != self.cert_sent[1]:
            return
        self.acks.add(src)
        if len(self.acks) >= 2 * self.f + 1:
            self.complete(self.cert_sent[0], "slow")

    def on_timeout(self) -> None:
        st = self.state
        if st.pending is None:
            return
        if self.cert_sent is None:
            best = max(self.spec.items(), key=lambda kv: (len(kv[1]), kv[0]), default=None)
            histories = {}
            for key, group in self.spec.items():
                histories.setdefault(key[1], set()).add(key[5])
            if any(len(h) > 1 for h in histories.values()):
                seq = next(s for s, h in sorted(histories.items()) if len(h) > 1)
                proof = tuple(r for key, g in sorted(self.spec.items()) if key[1] == seq for _, r in sorted(g.items()))
                self.metrics.bump("misbehavior_sent")
                self.emit(Broadcast(Misbehavior(seq, proof), self.replicas))
            if best is not None and len(best[1]) >= 2 * self.f + 1:
                key, group = best
                self.cert_sent = (key[4], key[1])
                cert = CommitCertificate(self.node_id, st.pending.nonce, key[1], key[5],
                                         tuple(group[r] for r in sorted(group)))
                self.emit(Broadcast(cert, self.replicas))
                st.timeout *= 2
                self.emit(SetTimer(st.timer_id, st.timeout))
                return
        super().on_timeout()


@script("withhold_certificates")
def withhold_certificates(env, ctx):
    """A client that never forwards commit certificates it has assembled."""
    if isinstance(env.payload, CommitCertificate):
        return []
    return [env]
