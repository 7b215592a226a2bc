"""Proof-of-Execution: propose, support (threshold share to the primary), certify.

Replicas execute speculatively as soon as a certified slot is next in order,
and reply to the client right away; a client needs ``2f+1`` matching replies.
Several slots may be in flight at once, bounded by the window ``w``. A view
change that does not carry a speculatively executed slot forward rolls it back.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .. import codec
from ..codec import frame
from ..crypto import Authenticator, ThresholdShare, ThresholdSignature
from ..ledger import Transaction
from ..simnet import script
from .base import PrimaryBackup, Report, ViewChange
from .common import NO_AUTH, ProtocolContext, signed_body


@frame(30)
@dataclass(frozen=True)
class Propose:
    view: int
    seq: int
    digest: bytes
    batch: tuple[Transaction, ...]
    auth: Authenticator


@frame(31)
@dataclass(frozen=True)
class Support:
    view: int
    seq: int
    digest: bytes
    share: ThresholdShare


@frame(32)
@dataclass(frozen=True)
class Certify:
    view: int
    seq: int
    digest: bytes
    sig: ThresholdSignature


class NotPrimary(RuntimeError):
    pass


class PoE(PrimaryBackup):
    Proposal = Propose
    speculative = True

    def __init__(self, node_id, ctx: ProtocolContext, **kw):
        super().__init__(node_id, ctx, **kw)
        self.t = 2 * self.f + 1
        self.group = ctx.group(self.t, "support")
        self.key = self.keyring.key(node_id)
        self.supports: dict[tuple, dict] = {}
        self.certified: set = set()
        self.handlers.update({Support: self.on_support, Certify: self.on_certify})

    def support_bytes(self, view, seq, digest) -> bytes:
        return codec.pack(self.domain, "poe-support", view, seq, digest)

    def proposal_bytes(self, view, seq, digest) -> bytes:
        return codec.pack(self.domain, "poe-propose", view, seq, digest)

    def cert_ok(self, r: Report) -> bool:
        try:
            sig = codec.decode(ThresholdSignature, r.cert)
        except (codec.CodecError, ValueError):
            return False
        return self.group.verify(sig, self.support_bytes(r.view, r.seq, r.digest))

    def propose_now(self, batch: tuple) -> None:
        """Explicit proposal entry point; only the current primary may call it."""
        if not self.is_primary():
            raise NotPrimary(f"replica {self.node_id} is not the primary of view {self.view}")
        self.propose(batch)

    def on_accepted(self, p: Propose) -> None:
        share = self.group.share(self.key, self.support_bytes(p.view, p.seq, p.digest))
        self.send(self.primary(p.view), Support(p.view, p.seq, p.digest, share))

    def on_support(self, m: Support, src) -> None:
        if self.defer(m.view, m, src):
            return
        if self.primary(m.view) != self.node_id or m.share.signer != str(src):
            return
        msg = self.support_bytes(m.view, m.seq, m.digest)
        if m.share.msg_digest != codec.sha3(msg) or not self.group.share_valid(m.share):
            self.metrics.bump("dropped_invalid")
            return
        key = (m.view, m.seq, m.digest)
        if key in self.certified:
            return
        shares = self.supports.setdefault(key, {})
        shares[src] = m.share
        if len(shares) >= self.t:
            self.certified.add(key)
            cert = Certify(m.view, m.seq, m.digest, self.group.combine(shares.values()))
            self.broadcast(cert)
            self.on_certify(cert, self.node_id)

    def on_certify(self, m: Certify, src) -> None:
        if self.defer(m.view, m, src):
            return
        if src != self.primary(m.view) and src != self.node_id:
            return
        if not self.group.verify(m.sig, self.support_bytes(m.view, m.seq, m.digest)):
            self.metrics.bump("dropped_invalid")
            return
        self.certify(m.seq, m.view, m.digest, codec.encode(m.sig))
        self.decide(m.seq, m.view, m.digest, None)


@script("poe_rollback")
def poe_rollback(env, ctx):
    """Byzantine primary that lets exactly one replica speculatively execute slot 1, then goes quiet.

    The slot-1 proposal skips ``params['skip']``; its certificate reaches only
    ``params['certify_to']``. Afterwards only view-change messages get out,
    with their evidence stripped, so the new view cannot learn about slot 1
    from this replica.
    """
    skip = ctx.params.get("skip", 1)
    certify_to = ctx.params.get("certify_to", 3)
    p = env.payload
    if ctx.state.get("quiet"):
        if isinstance(p, ViewChange):
            a = ctx.automaton
            stripped = ViewChange(p.new_view, p.sender, (), NO_AUTH)
            stripped = replace(stripped, auth=a.sign(signed_body(a.domain, stripped)))
            return [replace(env, payload=stripped)]
        return []
    if isinstance(p, Propose) and p.seq == 1:
        return [] if env.dst == skip else [env]
    if isinstance(p, Certify) and p.seq == 1:
        ctx.state["quiet"] = True
        return [env] if env.dst == certify_to else []
    if isinstance(p, (Propose, Certify)) and p.seq > 1:
        return []
    return [env]
