"""Chained HotStuff with a rotating leader.

Round ``r`` is led by ``r mod n``. A replica votes for the round-``r`` proposal
by sending a threshold share to the leader of ``r+1``, which combines ``2f+1``
shares into a quorum certificate and carries it in its own proposal. A block
commits once it heads a chain of three blocks from consecutive rounds, i.e.
when the proposal of round ``r+3`` arrives. Leaders only propose while
requests are outstanding, so a quiet system goes idle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .. import codec
from ..codec import frame
from ..crypto import Authenticator, ThresholdShare, ThresholdSignature
from ..ledger import ZERO_DIGEST, Transaction
from ..runtime import ClientRequest, Deliver, TimerFire
from .common import ProtocolContext, Replica, Request


@dataclass(frozen=True)
class QC:
    round: int
    digest: bytes
    sig: Optional[ThresholdSignature]


@dataclass(frozen=True)
class Node:
    round: int
    parent: bytes
    justify: QC
    batch: tuple[Transaction, ...]
    proposer: int


def node_digest(node: Node) -> bytes:
    return codec.sha3(codec.encode(node))


GENESIS_NODE = Node(0, ZERO_DIGEST, QC(0, ZERO_DIGEST, None), (), 0)
GENESIS_DIGEST = node_digest(GENESIS_NODE)
GENESIS_QC = QC(0, GENESIS_DIGEST, None)


@frame(50)
@dataclass(frozen=True)
class HsProposal:
    round: int
    node: Node
    auth: Authenticator


@frame(51)
@dataclass(frozen=True)
class Vote:
    round: int
    digest: bytes
    share: ThresholdShare


@frame(52)
@dataclass(frozen=True)
class NewRound:
    round: int
    high_qc: QC
    last_vote: Optional[Vote] = None


@frame(53)
@dataclass(frozen=True)
class NodeRequest:
    digest: bytes


@frame(54)
@dataclass(frozen=True)
class NodeResponse:
    node: Node


def leader_of(round: int, n: int) -> int:
    if n < 1:
        raise ValueError("n must be positive")
    return round % n


class HotStuff(Replica):
    def __init__(self, node_id, ctx: ProtocolContext, **kw):
        super().__init__(node_id, ctx, **kw)
        self.t = 2 * self.f + 1
        self.group = ctx.group(self.t, "vote")
        self.key = self.keyring.key(node_id)
        self.round = 1
        self.high_qc = GENESIS_QC
        self.locked_qc = GENESIS_QC
        self.nodes: dict[bytes, Node] = {GENESIS_DIGEST: GENESIS_NODE}
        self.committed_digest = GENESIS_DIGEST
        self.committed_round = 0
        self.last_voted = 0
        self.last_vote: Optional[Vote] = None
        self.proposed: set = set()
        self.votes: dict[tuple, dict] = {}
        self.new_rounds: dict[int, dict] = {}
        self.known: dict = {}
        self.executed_keys: set = set()
        self.waiting: dict[bytes, list] = {}
        self.base_timeout = int(ctx.knobs.get("round_timeout_factor", 5) * ctx.mean_delay)
        self.consecutive_timeouts = 0
        self.timer_armed = False
        self.lags: list[int] = []
        self.proposers: dict[int, int] = {}
        self.out_of_order = 0
        self.qc_rounds: set = {0}
        self.handlers = {
            Request: self.on_request_msg,
            HsProposal: self.on_proposal,
            Vote: self.on_vote,
            NewRound: self.on_new_round,
            NodeRequest: self.on_node_request,
            NodeResponse: self.on_node_response,
        }

    def leader(self, r: int):
        return self.members[leader_of(r, self.n)]

    def vote_bytes(self, r: int, digest: bytes) -> bytes:
        return codec.pack(self.domain, "hs-vote", r, digest)

    def proposal_bytes(self, r: int, digest: bytes) -> bytes:
        return codec.pack(self.domain, "hs-propose", r, digest)

    def qc_valid(self, qc: QC) -> bool:
        if qc.round == 0:
            return qc == GENESIS_QC
        return qc.sig is not None and self.group.verify(qc.sig, self.vote_bytes(qc.round, qc.digest))

    # -- dispatch --
    def dispatch(self, inp):
        if isinstance(inp, Deliver):
            self.handle(inp.payload, inp.src)
        elif isinstance(inp, TimerFire):
            self.on_timeout(inp.timer_id)
        elif isinstance(inp, ClientRequest):
            self.on_request(inp.tx, None)

    def handle(self, msg, src) -> None:
        h = self.handlers.get(type(msg))
        if h is None:
            self.metrics.bump("dropped_unknown")
            return
        h(msg, src)

    # -- requests --
    def on_request_msg(self, m: Request, src) -> None:
        self.on_request(m.tx, src)

    def on_request(self, tx: Transaction, src) -> None:
        if not self.tx_valid(tx):
            self.metrics.bump("bad_client_auth")
            return
        if tx.key in self.executed_keys:
            res = self.results.get(tx.key)
            if res is not None and isinstance(src, str):
                self.reply(self.committed_round, 0, tx, res)
            return
        self.known.setdefault(tx.key, tx)
        self.arm_timer()
        self.try_propose()

    def has_work(self) -> bool:
        return bool(self.known)

    # -- pacemaker --
    def arm_timer(self) -> None:
        if not self.timer_armed and self.has_work():
            self.timer_armed = True
            self.set_timer("round", self.base_timeout * (2 ** min(self.consecutive_timeouts, 8)))

    def reset_timer(self) -> None:
        if self.timer_armed:
            self.cancel_timer("round")
            self.timer_armed = False
        self.arm_timer()

    def on_timeout(self, tid) -> None:
        if tid != "round":
            return
        self.timer_armed = False
        if not self.has_work():
            return
        self.consecutive_timeouts += 1
        self.metrics.bump("round_timeouts")
        self.round += 1
        self.send(self.leader(self.round), NewRound(self.round, self.high_qc, self.last_vote))
        self.arm_timer()

    def on_new_round(self, m: NewRound, src) -> None:
        if self.leader(m.round) != self.node_id or m.round < self.round - 1:
            return
        if not self.qc_valid(m.high_qc):
            self.metrics.bump("dropped_invalid")
            return
        self.update_high_qc(m.high_qc)
        if m.last_vote is not None and m.last_vote.share.signer == str(src):
            # a vote whose intended collector never formed the certificate
            self.on_vote(m.last_vote, src, relayed=True)
        senders = self.new_rounds.setdefault(m.round, {})
        senders[src] = True
        if len(senders) >= self.t and m.round >= self.round:
            self.round = m.round
            self.try_propose(force=True)

    # -- proposing --
    def update_high_qc(self, qc: QC) -> None:
        if qc.round > self.high_qc.round:
            self.high_qc = qc

    def ancestors_keys(self, digest: bytes) -> set:
        keys = set()
        while digest != self.committed_digest and digest in self.nodes:
            node = self.nodes[digest]
            keys.update(tx.key for tx in node.batch)
            if node.round <= self.committed_round:
                break
            digest = node.parent
        return keys

    def try_propose(self, force: bool = False) -> None:
        r = self.round
        if self.leader(r) != self.node_id or r in self.proposed or not self.has_work():
            return
        if not force and self.high_qc.round != r - 1:
            return
        if self.high_qc.digest not in self.nodes:
            return
        if self.high_qc.round != r - 1 and self.high_qc.round not in self.qc_rounds:
            self.out_of_order += 1
        self.proposed.add(r)
        taken = self.ancestors_keys(self.high_qc.digest)
        batch = []
        for key, tx in self.known.items():
            if key not in taken:
                batch.append(tx)
                if len(batch) >= self.ctx.batch_size:
                    break
        node = Node(r, self.high_qc.digest, self.high_qc, tuple(batch), self.node_id)
        d = node_digest(node)
        p = HsProposal(r, node, self.sign(self.proposal_bytes(r, d)))
        self.broadcast(p)
        self.on_proposal(p, self.node_id)

    def equivocate(self, payload):
        if not isinstance(payload, HsProposal) or not payload.node.batch:
            return None
        forge = self.ctx.knobs.get("forge")
        if forge is None:
            return None
        n = payload.node
        node = Node(n.round, n.parent, n.justify, (forge(self.node_id, n.round),), n.proposer)
        return HsProposal(payload.round, node, self.sign(self.proposal_bytes(payload.round, node_digest(node))))

    # -- voting --
    def on_proposal(self, p: HsProposal, src) -> None:
        node = p.node
        if src != self.leader(p.round) or node.round != p.round or node.proposer != src:
            self.metrics.bump("dropped_not_leader")
            return
        d = node_digest(node)
        if not self.verify(src, self.proposal_bytes(p.round, d), p.auth):
            self.metrics.bump("dropped_invalid")
            return
        if node.justify.digest != node.parent or node.justify.round >= node.round or not self.qc_valid(node.justify):
            self.metrics.bump("dropped_invalid")
            return
        if not all(self.tx_valid(tx) for tx in node.batch):
            self.metrics.bump("dropped_invalid")
            return
        if node.parent not in self.nodes:
            self.waiting.setdefault(node.parent, []).append((p, src))
            self.send(src, NodeRequest(node.parent))
            return
        self.nodes[d] = node
        self.proposers[p.round] = src
        self.qc_rounds.add(node.justify.round)
        for tx in node.batch:
            if tx.key not in self.executed_keys:
                self.known.setdefault(tx.key, tx)
        self.update_high_qc(node.justify)
        self.update_chain(node)
        if p.round < self.round and src != self.node_id or p.round <= self.last_voted:
            self.retry_waiting(d)
            return
        if self.safe(node):
            self.last_voted = p.round
            share = self.group.share(self.key, self.vote_bytes(p.round, d))
            self.round = max(self.round, p.round + 1)
            self.consecutive_timeouts = 0
            self.last_vote = Vote(p.round, d, share)
            self.send(self.leader(p.round + 1), self.last_vote)
            self.reset_timer()
        self.retry_waiting(d)

    def retry_waiting(self, d: bytes) -> None:
        for p, src in self.waiting.pop(d, []):
            self.on_proposal(p, src)

    def extends(self, digest: bytes, ancestor: bytes) -> bool:
        target = self.nodes.get(ancestor)
        while digest in self.nodes:
            if digest == ancestor:
                return True
            node = self.nodes[digest]
            if target is not None and node.round <= target.round:
                return False
            digest = node.parent
        return False

    def safe(self, node: Node) -> bool:
        return self.extends(node.parent, self.locked_qc.digest) or node.justify.round > self.locked_qc.round

    def update_chain(self, node: Node) -> None:
        b2 = self.nodes.get(node.justify.digest)
        if b2 is None or b2 is GENESIS_NODE:
            return
        b1 = self.nodes.get(b2.justify.digest)
        if b1 is None:
            return
        if b2.justify.round > self.locked_qc.round:
            self.locked_qc = b2.justify
        b0 = self.nodes.get(b1.justify.digest)
        if b0 is None or b1 is GENESIS_NODE:
            return
        if b2.round == b1.round + 1 and b1.round == b0.round + 1 and b0.round > self.committed_round:
            self.commit(b1.justify.digest, node.round)

    def commit(self, digest: bytes, at_round: int) -> None:
        chain = []
        while digest != self.committed_digest:
            node = self.nodes[digest]
            if node.round <= self.committed_round:
                self.metrics.bump("commit_conflict")
                return
            chain.append((digest, node))
            digest = node.parent
        self.lags.append(at_round - chain[0][1].round)
        for d, node in reversed(chain):
            self.committed_digest = d
            self.committed_round = node.round
            fresh = tuple(tx for tx in node.batch if tx.key not in self.executed_keys)
            if fresh:
                for tx in fresh:
                    self.executed_keys.add(tx.key)
                    self.known.pop(tx.key, None)
                self.apply_batch(fresh, node.proposer, node.round)
        if not self.has_work() and self.timer_armed:
            self.cancel_timer("round")
            self.timer_armed = False

    def on_vote(self, m: Vote, src, relayed: bool = False) -> None:
        r = m.round
        if (not relayed and self.leader(r + 1) != self.node_id) or m.share.signer != str(src):
            return
        if m.share.msg_digest != codec.sha3(self.vote_bytes(r, m.digest)) or not self.group.share_valid(m.share):
            self.metrics.bump("dropped_invalid")
            return
        key = (r, m.digest)
        shares = self.votes.setdefault(key, {})
        if len(shares) >= self.t:
            return
        shares[src] = m.share
        if len(shares) == self.t:
            qc = QC(r, m.digest, self.group.combine(shares.values()))
            self.update_high_qc(qc)
            self.qc_rounds.add(r)
            if self.round <= r + 1:
                self.round = r + 1
                self.try_propose()

    # -- catch-up --
    def on_node_request(self, m: NodeRequest, src) -> None:
        node = self.nodes.get(m.digest)
        if node is not None:
            self.send(src, NodeResponse(node))

    def on_node_response(self, m: NodeResponse, src) -> None:
        node = m.node
        d = node_digest(node)
        if d not in self.waiting or d in self.nodes:
            return
        if not self.qc_valid(node.justify) or node.justify.digest != node.parent:
            return
        if node.parent not in self.nodes:
            self.waiting.setdefault(node.parent, []).append((None, node))
            self.send(src, NodeRequest(node.parent))
            return
        self.adopt(node, d)

    def adopt(self, node: Node, d: bytes) -> None:
        self.nodes[d] = node
        self.update_high_qc(node.justify)
        for p, src in self.waiting.pop(d, []):
            if p is None:
                self.adopt(src, node_digest(src))
            else:
                self.on_proposal(p, src)

    def inspect(self) -> dict:
        d = super().inspect()
        d.update(round=self.round, committed_round=self.committed_round, high_qc=self.high_qc.round)
        return d
