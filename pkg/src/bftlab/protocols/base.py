"""Primary-backup skeleton shared by PBFT, SBFT, PoE and the PBFT instances of RCC/RBFT/GeoBFT.

Subclasses supply the proposal message class, the bytes the primary signs for a
proposal, what to do once a proposal is accepted, and how to validate the
certificate that proves a slot was prepared/certified. Everything else lives
here: client requests, ordering, in-order execution, state fetch, and the
view-change / new-view exchange.

View change carries two kinds of evidence per sequence number: *accepted*
reports (the proposal the sender supported, signed by that view's primary)
and *certified* reports (a transferable quorum certificate). The new primary
re-proposes, per slot, the candidate of highest view where a candidate is
either a certified report or a value with ``f+1`` matching accepted reports;
certificates win ties within a view.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Optional

from .. import codec
from ..codec import frame
from ..crypto import Authenticator
from ..ledger import Block, Transaction, ZERO_DIGEST, batch_digest
from ..runtime import ClientRequest, Commit, Deliver, TimerFire, ViewChangeSignal
from .common import (
    NO_AUTH, Fetch, FetchReply, ProtocolContext, Replica, Request, signed_body,
)


@dataclass(frozen=True)
class Report:
    seq: int
    view: int
    digest: bytes
    batch: tuple[Transaction, ...]
    proposal_auth: Authenticator
    certified: bool
    cert: bytes


@dataclass(frozen=True)
class AuthList:
    auths: tuple[Authenticator, ...]


def pack_auths(auths) -> bytes:
    return codec.encode(AuthList(tuple(auths)))


def unpack_auths(data: bytes) -> tuple:
    try:
        return codec.decode(AuthList, data).auths
    except (codec.CodecError, ValueError):
        return ()


@frame(3)
@dataclass(frozen=True)
class ViewChange:
    new_view: int
    sender: int
    reports: tuple[Report, ...]
    auth: Authenticator


@frame(4)
@dataclass(frozen=True)
class NewView:
    view: int
    sender: int
    view_changes: tuple[ViewChange, ...]
    proposals: tuple[Any, ...]
    auth: Authenticator


@dataclass
class Slot:
    view: int = -1
    digest: bytes = b""
    batch: tuple = ()
    auth: Optional[Authenticator] = None
    cert_view: int = -1
    cert_digest: bytes = b""
    cert_batch: Optional[tuple] = None
    cert: bytes = b""


def select_proposals(view_changes, f: int) -> list[tuple[int, bytes, tuple]]:
    """Choose the (seq, digest, batch) each slot must carry into the new view.

    Slots up to the highest candidate sequence with no candidate become null
    (empty batch) proposals.
    """
    best: dict[int, tuple] = {}
    support: dict[tuple, set] = {}
    batches: dict[tuple, tuple] = {}
    for vc in view_changes:
        for r in vc.reports:
            if r.certified:
                cand = (r.view, 1, 0, r.digest)
                if r.seq not in best or cand > best[r.seq][0]:
                    best[r.seq] = (cand, r.batch)
            else:
                k = (r.seq, r.view, r.digest)
                support.setdefault(k, set()).add(vc.sender)
                batches[k] = r.batch
    for (seq, view, dig), senders in support.items():
        if len(senders) >= f + 1:
            cand = (view, 0, len(senders), dig)
            if seq not in best or cand > best[seq][0]:
                best[seq] = (cand, batches[(seq, view, dig)])
    if not best:
        return []
    top = max(best)
    out = []
    for seq in range(1, top + 1):
        if seq in best:
            cand, batch = best[seq]
            out.append((seq, cand[3], batch))
        else:
            out.append((seq, batch_digest(()), ()))
    return out


class PrimaryBackup(Replica):
    Proposal: type = None
    speculative = False

    def __init__(self, node_id, ctx: ProtocolContext, *, execute: bool = True, offset: int = 0, tag: str = ""):
        super().__init__(node_id, ctx, execute=execute)
        self.offset = offset
        self.tag = tag
        self.view = 0
        self.vc_view: Optional[int] = None
        self.next_seq = 1
        self.slots: dict[int, Slot] = {}
        self.accepted: dict[tuple[int, int], bytes] = {}
        self.committed: dict[int, tuple] = {}
        self.exec_digest: dict[int, bytes] = {}
        self.last_executed = 0
        self.known: OrderedDict = OrderedDict()
        self.assigned: dict = {}
        self.ordered: set = set()
        self.req_timer = False
        self.vc_store: dict[int, dict[int, ViewChange]] = {}
        self.newview_sent: set = set()
        self.future: dict[int, list] = {}
        self.fetching: set = set()
        self.max_inflight = 0
        self.handlers = {
            Request: self.on_request_msg,
            ViewChange: self.on_view_change,
            NewView: self.on_new_view,
            Fetch: self.on_fetch,
            FetchReply: self.on_fetch_reply,
        }
        self.handlers[self.Proposal] = self.on_proposal

    # -- roles --
    def primary(self, view: Optional[int] = None) -> Any:
        v = self.view if view is None else view
        if self.ctx.leader is not None:
            return self.ctx.leader(v + self.offset)
        return self.members[(v + self.offset) % self.n]

    def is_primary(self) -> bool:
        return self.primary() == self.node_id and self.vc_view is None

    @property
    def vc_quorum(self) -> int:
        return 2 * self.f + 1

    def timeout(self, view: int) -> int:
        return int(self.ctx.request_timeout_factor * self.ctx.mean_delay * (2 ** min(view, 6)))

    def tid(self, name):
        return (self.tag, name) if self.tag else name

    # -- subclass hooks --
    def proposal_bytes(self, view: int, seq: int, digest: bytes) -> bytes:
        raise NotImplementedError

    def on_accepted(self, p) -> None:
        raise NotImplementedError

    def cert_ok(self, r: Report) -> bool:
        raise NotImplementedError

    def after_execute(self, seq: int, view: int, batch, results) -> None:
        pass

    def reply_executed(self, tx: Transaction, src) -> None:
        res = self.results.get(tx.key)
        if res is not None and isinstance(src, str):
            self.reply(self.view, 0, tx, res)

    # -- dispatch --
    def dispatch(self, inp):
        if isinstance(inp, Deliver):
            self.handle(inp.payload, inp.src)
        elif isinstance(inp, TimerFire):
            self.on_timer(inp.timer_id)
        elif isinstance(inp, ClientRequest):
            self.on_request(inp.tx, None)

    def handle(self, msg, src) -> None:
        h = self.handlers.get(type(msg))
        if h is None:
            self.metrics.bump("dropped_unknown")
            return
        h(msg, src)

    def on_timer(self, tid) -> None:
        name = tid[1] if self.tag else tid
        if name == "req":
            self.req_timer = False
            self.metrics.bump("request_timeouts")
            self.start_view_change(self.view + 1)
        elif name == "vc":
            if self.vc_view is not None:
                self.start_view_change(self.vc_view + 1)
        else:
            self.on_other_timer(name)

    def on_other_timer(self, name) -> None:
        pass

    def defer(self, view: int, msg, src) -> bool:
        """Buffer messages for future views. Returns True when the message must not be processed now."""
        if view > self.view:
            self.future.setdefault(view, []).append((msg, src))
            return True
        if view < self.view or self.vc_view is not None:
            return True
        return False

    # -- client requests --
    def on_request_msg(self, m: Request, src) -> None:
        self.on_request(m.tx, src)

    def on_request(self, tx: Transaction, src, relay: bool = True) -> None:
        if not self.tx_valid(tx):
            self.metrics.bump("bad_client_auth")
            return
        key = tx.key
        if key in self.ordered:
            self.reply_executed(tx, src)
            return
        if key not in self.known:
            self.known[key] = tx
        if self.is_primary():
            self.maybe_propose()
            return
        if relay and isinstance(src, str):
            self.send(self.primary(), Request(tx))
        if src is not None and not isinstance(src, str):
            return
        self.arm_request_timer()

    def arm_request_timer(self) -> None:
        if not self.req_timer and self.vc_view is None and self.waiting():
            self.req_timer = True
            self.set_timer(self.tid("req"), self.timeout(self.view))

    def waiting(self) -> bool:
        return any(k not in self.ordered for k in self.known)

    def inflight(self) -> int:
        return self.next_seq - 1 - self.last_executed

    def maybe_propose(self) -> None:
        if not self.is_primary():
            return
        while self.inflight() < self.ctx.window:
            batch = []
            for key, tx in self.known.items():
                if key in self.ordered or key in self.assigned:
                    continue
                batch.append(tx)
                if len(batch) >= self.ctx.batch_size:
                    break
            if not batch:
                return
            self.propose(tuple(batch))

    def propose(self, batch: tuple) -> None:
        seq = self.next_seq
        self.next_seq += 1
        for tx in batch:
            self.assigned[tx.key] = seq
        p = self.make_proposal(self.view, seq, batch)
        self.max_inflight = max(self.max_inflight, self.inflight())
        self.broadcast(p)
        self.accept(p)

    def make_proposal(self, view: int, seq: int, batch: tuple):
        d = batch_digest(batch)
        return self.Proposal(view, seq, d, batch, self.sign(self.proposal_bytes(view, seq, d)))

    def propose_noops(self, upto: int) -> None:
        """Fill idle sequence numbers with empty batches up to ``upto`` (multi-instance catch-up)."""
        while self.is_primary() and self.next_seq <= upto:
            self.propose(())

    # -- proposals --
    def on_proposal(self, p, src) -> None:
        if self.defer(p.view, p, src):
            return
        if src != self.primary(p.view):
            self.metrics.bump("dropped_not_primary")
            return
        self.accept(p)

    def accept(self, p) -> bool:
        prev = self.accepted.get((p.view, p.seq))
        if prev is not None:
            if prev != p.digest:
                self.metrics.bump("equivocation_detected")
            return False
        if not self.batch_valid(p.digest, p.batch):
            self.metrics.bump("dropped_invalid")
            return False
        if not self.verify(self.primary(p.view), self.proposal_bytes(p.view, p.seq, p.digest), p.auth):
            self.metrics.bump("dropped_invalid")
            return False
        self.accepted[(p.view, p.seq)] = p.digest
        slot = self.slots.setdefault(p.seq, Slot())
        slot.view, slot.digest, slot.batch, slot.auth = p.view, p.digest, p.batch, p.auth
        if slot.cert and slot.cert_digest == p.digest:
            slot.cert_batch = p.batch
        for tx in p.batch:
            self.known.setdefault(tx.key, tx)
        self.on_accepted(p)
        return True

    def equivocate(self, payload):
        if not isinstance(payload, self.Proposal) or not payload.batch:
            return None
        forged = self.ctx.knobs.get("forge")
        if forged is None:
            return None
        batch = (forged(self.node_id, payload.seq),)
        d = batch_digest(batch)
        return self.Proposal(payload.view, payload.seq, d, batch, self.sign(self.proposal_bytes(payload.view, payload.seq, d)))

    def certify(self, seq: int, view: int, digest: bytes, cert: bytes) -> None:
        slot = self.slots.setdefault(seq, Slot())
        if view >= slot.cert_view:
            slot.cert_view, slot.cert_digest, slot.cert = view, digest, cert
            slot.cert_batch = slot.batch if slot.digest == digest else None

    # -- decisions and execution --
    def decide(self, seq: int, view: int, digest: bytes, batch: Optional[tuple]) -> None:
        if seq in self.committed or seq <= self.last_executed:
            return
        if batch is None:
            slot = self.slots.get(seq)
            if slot is not None and slot.digest == digest:
                batch = slot.batch
            elif slot is not None and slot.cert_digest == digest and slot.cert_batch is not None:
                batch = slot.cert_batch
        if batch is None:
            self.committed[seq] = (view, digest, None)
            if seq not in self.fetching:
                self.fetching.add(seq)
                self.broadcast(Fetch(seq, digest))
            return
        self.committed[seq] = (view, digest, batch)
        self.try_execute()

    def on_fetch(self, m: Fetch, src) -> None:
        entry = self.committed.get(m.seq)
        if entry is not None and entry[1] == m.digest and entry[2] is not None:
            self.send(src, FetchReply(m.seq, m.digest, entry[2]))

    def on_fetch_reply(self, m: FetchReply, src) -> None:
        entry = self.committed.get(m.seq)
        if entry is None or entry[2] is not None or entry[1] != m.digest:
            return
        if not self.batch_valid(m.digest, m.batch):
            return
        self.committed[m.seq] = (entry[0], m.digest, m.batch)
        self.fetching.discard(m.seq)
        self.try_execute()

    def try_execute(self) -> None:
        progressed = False
        while True:
            entry = self.committed.get(self.last_executed + 1)
            if entry is None or entry[2] is None:
                break
            view, digest, batch = entry
            seq = self.last_executed + 1
            self.last_executed = seq
            self.exec_digest[seq] = digest
            for tx in batch:
                self.ordered.add(tx.key)
                self.known.pop(tx.key, None)
            if self.execute_enabled:
                results = self.apply_batch(batch, self.primary(view), view)
            else:
                results = ()
                self.emit(Commit(seq, Block(seq, ZERO_DIGEST, batch, self.primary(view), view)))
            self.after_execute(seq, view, batch, results)
            progressed = True
        if progressed:
            if self.req_timer:
                self.cancel_timer(self.tid("req"))
                self.req_timer = False
            if self.vc_view is None and self.primary() != self.node_id:
                self.arm_request_timer()
            self.maybe_propose()

    # -- view change --
    def reports(self) -> tuple:
        out = []
        for seq in sorted(self.slots):
            s = self.slots[seq]
            if s.auth is not None:
                out.append(Report(seq, s.view, s.digest, s.batch, s.auth, False, b""))
            if s.cert and s.cert_batch is not None:
                cert_auth = s.auth if (s.cert_view == s.view and s.cert_digest == s.digest) else NO_AUTH
                out.append(Report(seq, s.cert_view, s.cert_digest, s.cert_batch, cert_auth, True, s.cert))
        return tuple(out)

    def start_view_change(self, v: int) -> None:
        if v <= self.view or (self.vc_view is not None and v <= self.vc_view):
            return
        self.vc_view = v
        if self.req_timer:
            self.cancel_timer(self.tid("req"))
            self.req_timer = False
        self.metrics.bump("view_change_started")
        vc = ViewChange(v, self.node_id, self.reports(), NO_AUTH)
        vc = ViewChange(v, self.node_id, vc.reports, self.sign(signed_body(self.domain, vc)))
        self.broadcast(vc)
        self.set_timer(self.tid("vc"), self.timeout(v))
        self.store_view_change(vc)
        self.check_new_view(v)

    def report_valid(self, r: Report) -> bool:
        if batch_digest(r.batch) != r.digest:
            return False
        if r.certified:
            return self.cert_ok(r)
        return self.verify(self.primary(r.view), self.proposal_bytes(r.view, r.seq, r.digest), r.proposal_auth)

    def view_change_valid(self, vc: ViewChange) -> bool:
        if vc.sender not in self.members:
            return False
        if not self.verify(vc.sender, signed_body(self.domain, vc), vc.auth):
            return False
        return all(self.report_valid(r) for r in vc.reports)

    def store_view_change(self, vc: ViewChange) -> None:
        self.vc_store.setdefault(vc.new_view, {})[vc.sender] = vc

    def on_view_change(self, vc: ViewChange, src) -> None:
        if vc.sender != src or vc.new_view <= self.view:
            return
        if not self.view_change_valid(vc):
            self.metrics.bump("dropped_invalid")
            return
        self.store_view_change(vc)
        current = self.vc_view if self.vc_view is not None else self.view
        if vc.new_view > current:
            latest: dict[int, int] = {}
            for view, msgs in self.vc_store.items():
                if view > current:
                    for sender in msgs:
                        latest[sender] = max(latest.get(sender, 0), view)
            if len(latest) >= self.f + 1:
                self.start_view_change(min(latest.values()))
        self.check_new_view(vc.new_view)

    def check_new_view(self, v: int) -> None:
        if self.vc_view != v or self.primary(v) != self.node_id or v in self.newview_sent:
            return
        vcs = self.vc_store.get(v, {})
        if len(vcs) < self.vc_quorum:
            return
        self.newview_sent.add(v)
        chosen = tuple(vcs[s] for s in sorted(vcs))
        proposals = tuple(self.make_proposal(v, seq, batch) for seq, _, batch in select_proposals(chosen, self.f))
        nv = NewView(v, self.node_id, chosen, proposals, NO_AUTH)
        nv = NewView(v, self.node_id, chosen, proposals, self.sign(signed_body(self.domain, nv)))
        self.broadcast(nv)
        self.install_view(v, proposals)

    def on_new_view(self, nv: NewView, src) -> None:
        if nv.view <= self.view or src != self.primary(nv.view) or nv.sender != src:
            return
        if not self.verify(src, signed_body(self.domain, nv), nv.auth):
            self.metrics.bump("dropped_invalid")
            return
        senders = set()
        for vc in nv.view_changes:
            if vc.new_view != nv.view or vc.sender in senders or not self.view_change_valid(vc):
                self.metrics.bump("dropped_invalid")
                return
            senders.add(vc.sender)
        if len(senders) < self.vc_quorum:
            self.metrics.bump("dropped_invalid")
            return
        expected = [(seq, d) for seq, d, _ in select_proposals(nv.view_changes, self.f)]
        got = [(p.seq, p.digest) for p in nv.proposals]
        if expected != got or any(p.view != nv.view for p in nv.proposals):
            self.metrics.bump("dropped_invalid")
            return
        self.install_view(nv.view, nv.proposals)

    def install_view(self, v: int, proposals) -> None:
        if self.vc_view is not None:
            self.cancel_timer(self.tid("vc"))
        if self.req_timer:
            self.cancel_timer(self.tid("req"))
            self.req_timer = False
        self.view = v
        self.vc_view = None
        self.metrics.bump("view_changes")
        self.emit(ViewChangeSignal(v))
        self.reconcile({p.seq: p.digest for p in proposals})
        top = max((p.seq for p in proposals), default=0)
        self.next_seq = max(top, self.last_executed) + 1
        self.assigned = {}
        for p in proposals:
            for tx in p.batch:
                self.assigned[tx.key] = p.seq
        for old in [w for w in self.vc_store if w <= v]:
            del self.vc_store[old]
        for p in proposals:
            if self.primary(v) == self.node_id:
                self.accept(p)
            else:
                self.on_proposal(p, self.primary(v))
        for w in sorted(self.future):
            if w < v:
                del self.future[w]
        for msg, src in self.future.pop(v, []):
            self.handle(msg, src)
        self.maybe_propose()
        if self.primary() != self.node_id:
            self.arm_request_timer()

    def reconcile(self, chosen: dict[int, bytes]) -> None:
        bad = None
        for seq in range(1, self.last_executed + 1):
            if chosen.get(seq) != self.exec_digest.get(seq):
                bad = seq
                break
        if not self.speculative:
            if bad is not None:
                self.metrics.bump("reconcile_conflicts")
            return
        for seq in [s for s, e in self.committed.items() if s > self.last_executed and chosen.get(s) != e[1]]:
            del self.committed[seq]
        if bad is None:
            return
        undone = self.rollback_to(bad - 1) if self.execute_enabled else []
        for seq in range(bad, self.last_executed + 1):
            self.exec_digest.pop(seq, None)
            self.committed.pop(seq, None)
        self.last_executed = bad - 1
        for tx in undone:
            self.ordered.discard(tx.key)
            self.known.setdefault(tx.key, tx)

    def inspect(self) -> dict:
        d = super().inspect()
        d.update(view=self.view, last_executed=self.last_executed, max_inflight=self.max_inflight)
        return d
