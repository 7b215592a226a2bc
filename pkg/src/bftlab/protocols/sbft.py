"""SBFT: linear twin-path ordering through a collector, execution acknowledged through an executor.

Fast path: every replica sends a threshold share to the collector, which
combines ``3f+c+1`` of them into a full-commit proof. If the collector's
timer fires first it falls back to two more linear phases (prepared
certificate, commit shares, commit certificate) with threshold ``2f+c+1``.
After execution each replica sends an execution share to the executor, which
combines ``f+1`` matching shares into one acknowledgement for replicas and
clients.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import codec
from ..client import Client
from ..codec import frame
from ..crypto import Authenticator, CryptoError, ThresholdGroup, ThresholdShare, ThresholdSignature
from ..ledger import Transaction
from .base import PrimaryBackup, Report
from .common import ProtocolContext


@frame(20)
@dataclass(frozen=True)
class SbftPrePrepare:
    view: int
    seq: int
    digest: bytes
    batch: tuple[Transaction, ...]
    auth: Authenticator


@frame(21)
@dataclass(frozen=True)
class SignShare:
    view: int
    seq: int
    digest: bytes
    share: ThresholdShare


@frame(22)
@dataclass(frozen=True)
class FullCommitProof:
    view: int
    seq: int
    digest: bytes
    sig: ThresholdSignature


@frame(23)
@dataclass(frozen=True)
class PreparedCert:
    view: int
    seq: int
    digest: bytes
    sig: ThresholdSignature


@frame(24)
@dataclass(frozen=True)
class CommitShare:
    view: int
    seq: int
    digest: bytes
    share: ThresholdShare


@frame(25)
@dataclass(frozen=True)
class CommitCert:
    view: int
    seq: int
    digest: bytes
    sig: ThresholdSignature


@frame(26)
@dataclass(frozen=True)
class ExecShare:
    seq: int
    digest: bytes
    clients: tuple[str, ...]
    nonces: tuple[int, ...]
    results: tuple[bytes, ...]
    share: ThresholdShare


@frame(27)
@dataclass(frozen=True)
class ExecAck:
    seq: int
    digest: bytes
    clients: tuple[str, ...]
    nonces: tuple[int, ...]
    results: tuple[bytes, ...]
    sig: ThresholdSignature


def sign_bytes(domain, view, seq, digest) -> bytes:
    return codec.pack(domain, "sbft-sign", view, seq, digest)


def commit_bytes(domain, view, seq, digest) -> bytes:
    return codec.pack(domain, "sbft-commit", view, seq, digest)


def exec_bytes(domain, seq, digest, clients, nonces, results) -> bytes:
    return codec.pack(domain, "sbft-exec", seq, digest, *clients, *nonces, *results)


def thresholds(f: int, c: int) -> tuple[int, int, int]:
    """(fast combine, slow combine, execution) thresholds."""
    return 3 * f + c + 1, 2 * f + c + 1, f + 1


class SBFT(PrimaryBackup):
    Proposal = SbftPrePrepare

    def __init__(self, node_id, ctx: ProtocolContext, **kw):
        super().__init__(node_id, ctx, **kw)
        self.c = ctx.c
        self.fast_t, self.slow_t, self.exec_t = thresholds(self.f, self.c)
        self.group = ctx.group(self.slow_t, "sign")
        self.commit_group = ctx.group(self.slow_t, "commit")
        self.exec_group = ctx.group(self.exec_t, "exec")
        self.key = self.keyring.key(node_id)
        self.collector_timeout = int(ctx.knobs.get("collector_timeout_factor", 4) * ctx.mean_delay)
        self.sign_shares: dict[tuple, dict] = {}
        self.commit_shares: dict[tuple, dict] = {}
        self.exec_shares: dict[tuple, dict] = {}
        self.slow: set = set()
        self.expired: set = set()
        self.done: set = set()
        self.commit_sent: set = set()
        self.acked: set = set()
        self.handlers.update({
            SignShare: self.on_sign_share,
            FullCommitProof: self.on_full_commit,
            PreparedCert: self.on_prepared_cert,
            CommitShare: self.on_commit_share,
            CommitCert: self.on_commit_cert,
            ExecShare: self.on_exec_share,
            ExecAck: self.on_exec_ack,
        })

    @property
    def vc_quorum(self) -> int:
        return self.slow_t

    def collector(self, view=None):
        return self.members[(self.members.index(self.primary(view)) + 1) % self.n]

    def executor(self, view=None):
        return self.members[(self.members.index(self.primary(view)) + 2) % self.n]

    def proposal_bytes(self, view, seq, digest) -> bytes:
        return codec.pack(self.domain, "sbft-propose", view, seq, digest)

    def cert_ok(self, r: Report) -> bool:
        try:
            sig = codec.decode(ThresholdSignature, r.cert)
        except (codec.CodecError, ValueError):
            return False
        return self.group.verify(sig, sign_bytes(self.domain, r.view, r.seq, r.digest), self.slow_t)

    # -- ordering --
    def on_accepted(self, p: SbftPrePrepare) -> None:
        share = self.group.share(self.key, sign_bytes(self.domain, p.view, p.seq, p.digest))
        col = self.collector(p.view)
        if col == self.node_id:
            self.set_timer(("col", p.view, p.seq), self.collector_timeout)
        self.send(col, SignShare(p.view, p.seq, p.digest, share))

    def on_sign_share(self, m: SignShare, src) -> None:
        if self.defer(m.view, m, src):
            return
        if self.collector(m.view) != self.node_id or m.share.signer != str(src):
            return
        if not self.valid_share(self.group, m.share, sign_bytes(self.domain, m.view, m.seq, m.digest)):
            self.metrics.bump("dropped_invalid")
            return
        key = (m.view, m.seq, m.digest)
        self.sign_shares.setdefault(key, {})[src] = m.share
        self.try_combine(key)

    def valid_share(self, group: ThresholdGroup, share: ThresholdShare, msg: bytes) -> bool:
        return share.msg_digest == codec.sha3(msg) and group.share_valid(share)

    def try_combine(self, key) -> None:
        view, seq, digest = key
        if key in self.done:
            return
        shares = self.sign_shares.get(key, {})
        if len(shares) >= self.fast_t and key not in self.slow:
            sig = self.group.combine(shares.values(), self.fast_t)
            self.done.add(key)
            self.cancel_timer(("col", view, seq))
            self.metrics.bump("fast_path")
            proof = FullCommitProof(view, seq, digest, sig)
            self.broadcast(proof)
            self.on_full_commit(proof, self.node_id)
        elif len(shares) >= self.slow_t and (view, seq) in self.expired:
            sig = self.group.combine(shares.values(), self.slow_t)
            self.done.add(key)
            self.slow.add(key)
            self.metrics.bump("slow_path")
            cert = PreparedCert(view, seq, digest, sig)
            self.broadcast(cert)
            self.on_prepared_cert(cert, self.node_id)

    def on_other_timer(self, name) -> None:
        if isinstance(name, tuple) and name[0] == "col":
            _, view, seq = name
            self.expired.add((view, seq))
            for key in [k for k in self.sign_shares if k[0] == view and k[1] == seq]:
                self.try_combine(key)

    def on_full_commit(self, m: FullCommitProof, src) -> None:
        if self.defer(m.view, m, src):
            return
        if not self.group.verify(m.sig, sign_bytes(self.domain, m.view, m.seq, m.digest), self.fast_t):
            self.metrics.bump("dropped_invalid")
            return
        self.certify(m.seq, m.view, m.digest, codec.encode(m.sig))
        self.decide(m.seq, m.view, m.digest, None)

    def on_prepared_cert(self, m: PreparedCert, src) -> None:
        if self.defer(m.view, m, src):
            return
        if not self.group.verify(m.sig, sign_bytes(self.domain, m.view, m.seq, m.digest), self.slow_t):
            self.metrics.bump("dropped_invalid")
            return
        key = (m.view, m.seq, m.digest)
        self.certify(m.seq, m.view, m.digest, codec.encode(m.sig))
        if key in self.commit_sent:
            return
        self.commit_sent.add(key)
        share = self.commit_group.share(self.key, commit_bytes(self.domain, *key))
        self.send(self.collector(m.view), CommitShare(m.view, m.seq, m.digest, share))

    def on_commit_share(self, m: CommitShare, src) -> None:
        if self.defer(m.view, m, src):
            return
        if self.collector(m.view) != self.node_id or m.share.signer != str(src):
            return
        msg = commit_bytes(self.domain, m.view, m.seq, m.digest)
        if not self.valid_share(self.commit_group, m.share, msg):
            self.metrics.bump("dropped_invalid")
            return
        key = (m.view, m.seq, m.digest)
        shares = self.commit_shares.setdefault(key, {})
        if len(shares) >= self.slow_t:
            return
        shares[src] = m.share
        if len(shares) == self.slow_t:
            cert = CommitCert(m.view, m.seq, m.digest, self.commit_group.combine(shares.values()))
            self.broadcast(cert)
            self.on_commit_cert(cert, self.node_id)

    def on_commit_cert(self, m: CommitCert, src) -> None:
        if self.defer(m.view, m, src):
            return
        if not self.commit_group.verify(m.sig, commit_bytes(self.domain, m.view, m.seq, m.digest)):
            self.metrics.bump("dropped_invalid")
            return
        self.decide(m.seq, m.view, m.digest, None)

    # -- execution --
    def after_execute(self, seq, view, batch, results) -> None:
        if not self.execute_enabled:
            return
        clients = tuple(tx.client_id for tx in batch)
        nonces = tuple(tx.nonce for tx in batch)
        digest = self.exec_digest[seq]
        share = self.exec_group.share(self.key, exec_bytes(self.domain, seq, digest, clients, nonces, results))
        self.send(self.executor(), ExecShare(seq, digest, clients, nonces, tuple(results), share))

    def apply_batch(self, batch, proposer=None, view=0, certificate=b"", reply=True):
        return super().apply_batch(batch, proposer, view, certificate, reply=False)

    def on_exec_share(self, m: ExecShare, src) -> None:
        if m.share.signer != str(src) or m.seq in self.acked:
            return
        msg = exec_bytes(self.domain, m.seq, m.digest, m.clients, m.nonces, m.results)
        if not self.valid_share(self.exec_group, m.share, msg):
            self.metrics.bump("dropped_invalid")
            return
        key = (m.seq, m.share.msg_digest)
        shares = self.exec_shares.setdefault(key, {})
        shares[src] = m.share
        if len(shares) >= self.exec_t:
            self.acked.add(m.seq)
            ack = ExecAck(m.seq, m.digest, m.clients, m.nonces, m.results, self.exec_group.combine(shares.values()))
            self.broadcast(ack)
            for client in sorted(set(m.clients)):
                if client in self.ctx.clients:
                    self.send(client, ack)

    def on_exec_ack(self, m: ExecAck, src) -> None:
        if m.seq in self.acked:
            return
        if self.exec_group.verify(m.sig, exec_bytes(self.domain, m.seq, m.digest, m.clients, m.nonces, m.results)):
            self.acked.add(m.seq)

    def reply_executed(self, tx, src) -> None:
        res = self.results.get(tx.key)
        if res is not None and isinstance(src, str):
            self.reply(self.view, 0, tx, res)


class SbftClient(Client):
    """Completes on one valid executor acknowledgement, or on f+1 matching direct replies."""

    def __init__(self, name, keyring, replicas, need, *, f: int = 1, **kw):
        super().__init__(name, keyring, replicas, need, **kw)
        self.exec_group = ThresholdGroup(keyring, replicas, f + 1, (self.domain + "exec").encode())

    def on_message(self, m, src) -> None:
        if isinstance(m, ExecAck):
            self.on_exec_ack(m)
        else:
            super().on_message(m, src)

    def on_exec_ack(self, m: ExecAck) -> None:
        st = self.state
        if st.pending is None:
            return
        try:
            ok = self.exec_group.verify(m.sig, exec_bytes(self.domain, m.seq, m.digest, m.clients, m.nonces, m.results))
        except CryptoError:
            ok = False
        if not ok:
            self.metrics.bump("bad_reply_auth")
            return
        for client, nonce, result in zip(m.clients, m.nonces, m.results):
            if client == self.node_id and nonce == st.pending.nonce:
                self.complete(result, "executor")
                return
