"""PBFT: pre-prepare, prepare, commit, with view change from the shared skeleton.

The primary's pre-prepare signature covers the same bytes as a prepare vote,
so it doubles as the primary's prepare and a prepared certificate is simply
``2f+1`` signatures over ``(view, seq, digest)``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import codec
from ..codec import frame
from ..crypto import Authenticator, verify_quorum
from ..ledger import Transaction
from .base import PrimaryBackup, Report, pack_auths, unpack_auths


@frame(10)
@dataclass(frozen=True)
class PrePrepare:
    view: int
    seq: int
    digest: bytes
    batch: tuple[Transaction, ...]
    auth: Authenticator


@frame(11)
@dataclass(frozen=True)
class Prepare:
    view: int
    seq: int
    digest: bytes
    replica: int
    auth: Authenticator


@frame(12)
@dataclass(frozen=True)
class CommitVote:
    view: int
    seq: int
    digest: bytes
    replica: int
    auth: Authenticator


class PBFT(PrimaryBackup):
    Proposal = PrePrepare

    def __init__(self, node_id, ctx, **kw):
        super().__init__(node_id, ctx, **kw)
        self.prepares: dict[tuple, dict] = {}
        self.commits: dict[tuple, dict] = {}
        self.prepared: set = set()
        self.commit_sent: set = set()
        self.commit_certs: dict[int, tuple] = {}
        self.handlers[Prepare] = self.on_prepare
        self.handlers[CommitVote] = self.on_commit

    def prepare_bytes(self, view, seq, digest) -> bytes:
        return codec.pack(self.domain, "prepare", view, seq, digest)

    def commit_bytes(self, view, seq, digest) -> bytes:
        return codec.pack(self.domain, "commit", view, seq, digest)

    proposal_bytes = prepare_bytes

    def cert_ok(self, r: Report) -> bool:
        return verify_quorum(self.keyring, self.prepare_bytes(r.view, r.seq, r.digest),
                             unpack_auths(r.cert), self.members, 2 * self.f + 1)

    def commit_cert_ok(self, view, seq, digest, cert: bytes) -> bool:
        return verify_quorum(self.keyring, self.commit_bytes(view, seq, digest),
                             unpack_auths(cert), self.members, 2 * self.f + 1)

    def on_accepted(self, p: PrePrepare) -> None:
        key = (p.view, p.seq, p.digest)
        votes = self.prepares.setdefault(key, {})
        if self.primary(p.view) != self.node_id:
            auth = self.sign(self.prepare_bytes(*key))
            votes[self.node_id] = auth
            self.broadcast(Prepare(p.view, p.seq, p.digest, self.node_id, auth))
        self.check_prepared(key)
        self.check_committed(key)

    def on_prepare(self, m: Prepare, src) -> None:
        if self.defer(m.view, m, src):
            return
        if m.replica != src or src == self.primary(m.view):
            return
        if not self.verify(src, self.prepare_bytes(m.view, m.seq, m.digest), m.auth):
            self.metrics.bump("dropped_invalid")
            return
        key = (m.view, m.seq, m.digest)
        self.prepares.setdefault(key, {})[src] = m.auth
        self.check_prepared(key)

    def check_prepared(self, key) -> None:
        view, seq, digest = key
        if key in self.prepared or self.accepted.get((view, seq)) != digest:
            return
        votes = self.prepares.get(key, {})
        if len(votes) < 2 * self.f:
            return
        self.prepared.add(key)
        slot = self.slots[seq]
        cert = pack_auths([slot.auth] + [votes[r] for r in sorted(votes, key=str)])
        self.certify(seq, view, digest, cert)
        if key not in self.commit_sent:
            self.commit_sent.add(key)
            auth = self.sign(self.commit_bytes(*key))
            self.commits.setdefault(key, {})[self.node_id] = auth
            self.broadcast(CommitVote(view, seq, digest, self.node_id, auth))
        self.check_committed(key)

    def on_commit(self, m: CommitVote, src) -> None:
        if self.defer(m.view, m, src):
            return
        if m.replica != src:
            return
        if not self.verify(src, self.commit_bytes(m.view, m.seq, m.digest), m.auth):
            self.metrics.bump("dropped_invalid")
            return
        key = (m.view, m.seq, m.digest)
        self.commits.setdefault(key, {})[src] = m.auth
        self.check_committed(key)

    def check_committed(self, key) -> None:
        view, seq, digest = key
        votes = self.commits.get(key, {})
        if len(votes) < 2 * self.f + 1 or seq in self.commit_certs:
            return
        # 2f+1 commits imply f+1 correct replicas prepared, so a replica that
        # missed the pre-prepare may still decide and fetch the batch.
        self.commit_certs[seq] = (view, digest, pack_auths(votes[r] for r in sorted(votes, key=str)))
        self.decide(seq, view, digest, None)
