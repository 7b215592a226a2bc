"""Nakamoto-style consensus: proof-of-work, chain-based proof-of-stake, proof-of-authority.

The pure pieces (mining, fork choice, confirmation depth, stake draws, authority
validation) are plain functions. The automata below drive them inside the
simulator. Mining there uses exponential waiting times whose rate follows each
miner's hash power, which is statistically equivalent to hashing against a
target but cheap enough for runs of many thousands of blocks.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Union

from .. import codec
from ..codec import frame
from ..crypto import Authenticator, Keyring
from ..ledger import ZERO_DIGEST, Chain, ChainBuilder, Transaction
from ..runtime import ClientRequest, Deliver, TimerFire
from ..simnet import script
from .common import Replica, Request

# --- proof of work ---------------------------------------------------------------

MAX_TARGET = 2 ** 256 - 1


@dataclass(frozen=True)
class Exhausted:
    tried: int


def pow_digest(header: bytes, nonce: int) -> bytes:
    return codec.sha3(header, nonce.to_bytes(8, "big"))


def pow_valid(header: bytes, nonce: int, target: int) -> bool:
    return int.from_bytes(pow_digest(header, nonce), "big") < target


def pow_mine(header: bytes, target: int, nonce_range: range) -> Union[int, Exhausted]:
    """Smallest nonce in ``nonce_range`` whose digest falls below ``target``."""
    if len(nonce_range) == 0:
        raise ValueError("nonce range must be non-empty")
    if target <= 0:
        return Exhausted(0)
    for nonce in nonce_range:
        if pow_valid(header, nonce, target):
            return nonce
    return Exhausted(len(nonce_range))


# --- fork tree -------------------------------------------------------------------

class NotOnCanonicalChain(LookupError):
    pass


@dataclass(frozen=True)
class TreeNode:
    digest: bytes
    parent: bytes
    height: int
    arrival: int


class ForkTree:
    """All blocks a node has seen, rooted at genesis, with arrival order for tie-breaks."""

    def __init__(self, root: bytes = ZERO_DIGEST):
        self.root = root
        self.nodes: dict[bytes, TreeNode] = {root: TreeNode(root, ZERO_DIGEST, 0, 0)}
        self.children: dict[bytes, list[bytes]] = {root: []}
        self._arrivals = 1
        self._best = root

    def __contains__(self, digest: bytes) -> bool:
        return digest in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def add(self, digest: bytes, parent: bytes) -> TreeNode:
        if digest in self.nodes:
            return self.nodes[digest]
        if parent not in self.nodes:
            raise KeyError("unknown parent")
        node = TreeNode(digest, parent, self.nodes[parent].height + 1, self._arrivals)
        self._arrivals += 1
        self.nodes[digest] = node
        self.children[digest] = []
        self.children[parent].append(digest)
        best = self.nodes[self._best]
        if node.height > best.height:
            self._best = digest
        return node

    @property
    def best(self) -> bytes:
        """Incrementally maintained result of ``fork_choice``."""
        return self._best

    def ancestor(self, digest: bytes, height: int) -> bytes:
        while self.nodes[digest].height > height:
            digest = self.nodes[digest].parent
        return digest

    def tips(self) -> list[bytes]:
        return [d for d, kids in self.children.items() if not kids]

    def path(self, tip: bytes) -> list[bytes]:
        """Digests from the first block above the root up to ``tip``."""
        out = []
        while tip != self.root:
            out.append(tip)
            tip = self.nodes[tip].parent
        out.reverse()
        return out

    def to_json(self) -> list[dict]:
        return [{"digest": n.digest.hex(), "parent": n.parent.hex(), "height": n.height, "arrival": n.arrival}
                for n in sorted(self.nodes.values(), key=lambda n: n.arrival)]


def fork_choice(tree: ForkTree) -> bytes:
    """Tip of maximum height; among equals the one that arrived first."""
    best = None
    for d in tree.tips():
        n = tree.nodes[d]
        if best is None or (n.height, -n.arrival) > (best.height, -best.arrival):
            best = n
    return best.digest


def confirmation_depth(tree: ForkTree, digest: bytes) -> int:
    if digest not in tree.nodes:
        raise KeyError("unknown block")
    tip = fork_choice(tree)
    if digest != tree.root and digest not in set(tree.path(tip)):
        raise NotOnCanonicalChain(digest.hex())
    return tree.nodes[tip].height - tree.nodes[digest].height


# --- proof of stake --------------------------------------------------------------

class ZeroTotalWeight(ValueError):
    pass


class Mode(enum.Enum):
    STAKE = "stake"
    COINAGE = "coinage"


@dataclass
class Validator:
    id: int
    stake: Fraction
    coinage: Fraction = Fraction(0)

    def __post_init__(self):
        self.stake = Fraction(self.stake)
        self.coinage = Fraction(self.coinage)
        if self.stake < 0:
            raise ValueError("stake must be non-negative")


def accrue(validators: Iterable[Validator], ticks: int) -> None:
    """Coinage grows by stake times holding time."""
    for v in validators:
        v.coinage += v.stake * ticks


def pos_select(validators: list[Validator], seed, mode: Mode = Mode.STAKE) -> int:
    weights = [v.stake if mode is Mode.STAKE else v.coinage for v in validators]
    total = sum(weights, Fraction(0))
    if total <= 0:
        raise ZeroTotalWeight("validators carry no weight")
    point = Fraction(random.Random(seed).random()) * total
    acc = Fraction(0)
    chosen = validators[-1]
    for v, w in zip(validators, weights):
        acc += w
        if w > 0 and point < acc:
            chosen = v
            break
    if mode is Mode.COINAGE:
        chosen.coinage = Fraction(0)
    return chosen.id


def validators_from(stakes) -> list[Validator]:
    return [Validator(i, Fraction(s).limit_denominator(10 ** 6)) for i, s in enumerate(stakes)]


# --- proof of authority ----------------------------------------------------------

class PoaVerdict(enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


def poa_validate(block: bytes, signatures: Iterable[Authenticator], auth_set, keyring: Keyring) -> PoaVerdict:
    """Accepted iff a strict majority of the authorities validly signed ``block``."""
    auth = {str(a) for a in auth_set}
    if not auth:
        raise ValueError("authority set must be non-empty")
    signers = set()
    for sig in signatures:
        if sig.signer in auth and sig.signer not in signers and keyring.verify_from(_node(sig.signer), block, sig):
            signers.add(sig.signer)
    return PoaVerdict.ACCEPTED if 2 * len(signers) > len(auth) else PoaVerdict.REJECTED


def _node(name: str):
    return int(name) if name.isdigit() else name


# --- simulated chains ------------------------------------------------------------

@dataclass(frozen=True)
class NakamotoBlock:
    parent: bytes
    height: int
    proposer: int
    time: int
    transactions: tuple[Transaction, ...]
    slot: int = 0

    @property
    def digest(self) -> bytes:
        return codec.sha3(codec.encode(self))


@frame(70)
@dataclass(frozen=True)
class Mined:
    block: NakamotoBlock


@frame(71)
@dataclass(frozen=True)
class Staked:
    block: NakamotoBlock
    auth: Authenticator


@frame(72)
@dataclass(frozen=True)
class PoaProposal:
    block: NakamotoBlock
    auth: Authenticator


@frame(73)
@dataclass(frozen=True)
class PoaVote:
    digest: bytes
    auth: Authenticator


class ChainNode(Replica):
    """Fork-tree bookkeeping shared by the PoW and PoS automata."""

    def __init__(self, node_id, ctx, **kw):
        super().__init__(node_id, ctx, **kw)
        self.tree = ForkTree()
        self.blocks: dict[bytes, NakamotoBlock] = {}
        self.orphans: dict[bytes, list[NakamotoBlock]] = {}
        self.pool: dict = {}
        self.k_conf = int(ctx.knobs.get("k_conf", 6))
        self.replied: set = set()
        self.confirmed: set = set()
        self.mined = 0

    @property
    def tip(self) -> bytes:
        return self.tree.best

    def canonical(self) -> list[NakamotoBlock]:
        return [self.blocks[d] for d in self.tree.path(self.tip)]

    def canonical_chain(self) -> Chain:
        builder = ChainBuilder()
        for b in self.canonical():
            builder.append(builder.make_block(b.transactions, b.proposer, b.height))
        return builder.freeze()

    def included(self, tip: bytes) -> set:
        return {tx.key for d in self.tree.path(tip) for tx in self.blocks[d].transactions}

    def pick_transactions(self, tip: bytes) -> tuple:
        if not self.pool:
            return ()
        done = self.included(tip)
        out = []
        for key, tx in self.pool.items():
            if key not in done:
                out.append(tx)
                if len(out) >= self.ctx.batch_size:
                    break
        return tuple(out)

    def on_request(self, tx: Transaction, src) -> None:
        if not self.tx_valid(tx):
            self.metrics.bump("bad_client_auth")
            return
        self.pool.setdefault(tx.key, tx)
        if tx.key in self.replied and isinstance(src, str):
            self.reply(0, 0, tx, self.results.get(tx.key, b""))

    def receive(self, block: NakamotoBlock) -> bool:
        d = block.digest
        if d in self.blocks:
            return False
        if block.parent not in self.tree:
            self.orphans.setdefault(block.parent, []).append(block)
            return False
        old = self.tip
        self.blocks[d] = block
        self.tree.add(d, block.parent)
        for child in self.orphans.pop(d, []):
            self.receive(child)
        if self.tip != old:
            self.on_new_tip()
        return True

    def on_new_tip(self) -> None:
        self.confirm()

    def confirm(self) -> None:
        """Answer clients for transactions buried at least ``k_conf`` blocks deep."""
        tree = self.tree
        height = tree.nodes[self.tip].height - self.k_conf
        if height < 1:
            return
        d = tree.ancestor(self.tip, height)
        fresh = []
        while d != tree.root and d not in self.confirmed:
            fresh.append(d)
            d = tree.nodes[d].parent
        for d in reversed(fresh):
            self.confirmed.add(d)
            b = self.blocks[d]
            for tx in b.transactions:
                if tx.key in self.replied:
                    continue
                self.replied.add(tx.key)
                res = self.results.get(tx.key)
                if res is None:
                    res, _ = self.store.apply(tx.payload)
                    self.results[tx.key] = res
                self.reply(b.height, b.height, tx, res)

    def fork_rate(self) -> float:
        total = len(self.blocks)
        if total == 0:
            return 0.0
        return (total - len(self.tree.path(self.tip))) / total

    def winners(self) -> dict:
        out: dict = {}
        for b in self.canonical():
            out[b.proposer] = out.get(b.proposer, 0) + 1
        return out

    def inspect(self) -> dict:
        d = super().inspect()
        d.update(height=self.tree.nodes[self.tip].height, blocks_seen=len(self.blocks), mined=self.mined)
        return d


class Miner(ChainNode):
    """PoW miner under the exponential mining model with periodic difficulty retargeting."""

    def __init__(self, node_id, ctx, hash_share: float, seed: int = 0, **kw):
        super().__init__(node_id, ctx, **kw)
        self.hash_share = hash_share
        self.interval = float(ctx.knobs.get("interval", 1000))
        self.retarget_every = max(2, int(ctx.knobs.get("retarget", 10)))
        self.difficulty = 1.0
        self.rng = random.Random(f"mine:{seed}:{node_id}")
        self.started = False
        self.handlers = {Mined: self.on_mined, Request: lambda m, src: self.on_request(m.tx, src)}

    def dispatch(self, inp):
        if isinstance(inp, Deliver):
            self.handle(inp.payload, inp.src)
        elif isinstance(inp, TimerFire):
            self.on_solve()
        elif isinstance(inp, ClientRequest):
            self.on_request(inp.tx, None)

    def handle(self, msg, src) -> None:
        h = self.handlers.get(type(msg))
        if h is None:
            self.metrics.bump("dropped_unknown")
            return
        h(msg, src)

    def start(self) -> list:
        self._out = []
        self.rearm()
        out, self._out = self._out, []
        return out

    def rearm(self) -> None:
        """Memoryless mining: a fresh exponential draw is as good as the remaining one."""
        if self.hash_share <= 0:
            return
        mean = self.interval * self.difficulty / self.hash_share
        self.set_timer("mine", max(1, round(self.rng.expovariate(1.0 / mean))))

    def retarget(self) -> None:
        """Every R canonical blocks, rescale difficulty so the mean interval tracks the configured one."""
        tree, tip = self.tree, self.tip
        h = tree.nodes[tip].height
        if h == 0 or h % self.retarget_every:
            return
        first = tree.ancestor(tip, h - self.retarget_every)
        start = self.blocks[first].time if first != tree.root else 0
        span = self.blocks[tip].time - start
        if span <= 0:
            return
        # (R-1)/span is the unbiased rate estimate for R exponential gaps
        measured = span / (self.retarget_every - 1)
        self.difficulty *= min(4.0, max(0.25, self.interval / measured))

    def on_solve(self) -> None:
        tip = self.tip
        block = NakamotoBlock(tip, self.tree.nodes[tip].height + 1, self.node_id, self.local_time(), self.pick_transactions(tip))
        self.mined += 1
        self.broadcast(Mined(block))
        self.receive(block)
        self.rearm()

    def local_time(self) -> int:
        """Block timestamp from the node's local clock, injected by the host."""
        clock = self.ctx.knobs.get("clock")
        return clock() if clock is not None else 0

    def on_mined(self, m: Mined, src) -> None:
        if m.block.proposer != src:
            return
        self.receive(m.block)

    def on_new_tip(self) -> None:
        super().on_new_tip()
        self.retarget()
        self.rearm()

    def fork_blocks(self) -> list[NakamotoBlock]:
        """Blocks on every other leaf: the nothing-at-stake strategy of extending all branches."""
        out = []
        for leaf in self.tree.tips():
            if leaf == self.tip or leaf == self.tree.root:
                continue
            b = NakamotoBlock(leaf, self.tree.nodes[leaf].height + 1, self.node_id, self.local_time(), ())
            self.receive(b)
            out.append(b)
        return out


@script("mine_all_branches")
def mine_all_branches(env, ctx):
    """Every time this miner publishes a block it also extends every other branch it knows."""
    if isinstance(env.payload, Mined) and not ctx.state.get(("done", env.payload.block.digest)):
        ctx.state[("done", env.payload.block.digest)] = True
        extra = [env]
        for b in ctx.automaton.fork_blocks():
            extra.append(type(env)(env.src, env.dst, Mined(b), env.send_time))
        return extra
    return [env]


class Staker(ChainNode):
    """Chain-based PoS: one proposer per slot, drawn from a schedule every validator computes alike."""

    def __init__(self, node_id, ctx, stakes, seed: int = 0, mode: Mode = Mode.STAKE, **kw):
        super().__init__(node_id, ctx, **kw)
        self.stakes = list(stakes)
        self.slot_ticks = int(ctx.knobs.get("slot", 100))
        self.seed = seed
        self.mode = mode
        self.validators = validators_from(self.stakes)
        self.schedule: list[int] = []
        self.slot = 0
        self.handlers = {Staked: self.on_staked, Request: lambda m, src: self.on_request(m.tx, src)}

    def dispatch(self, inp):
        if isinstance(inp, Deliver):
            self.handle(inp.payload, inp.src)
        elif isinstance(inp, TimerFire):
            self.on_slot()
        elif isinstance(inp, ClientRequest):
            self.on_request(inp.tx, None)

    def handle(self, msg, src) -> None:
        h = self.handlers.get(type(msg))
        if h is None:
            self.metrics.bump("dropped_unknown")
            return
        h(msg, src)

    def start(self) -> list:
        self._out = []
        self.set_timer("slot", self.slot_ticks)
        out, self._out = self._out, []
        return out

    def leader(self, slot: int) -> int:
        """Proposer of ``slot``; the schedule only depends on stakes and the seed."""
        while len(self.schedule) < slot:
            accrue(self.validators, self.slot_ticks)
            self.schedule.append(pos_select(self.validators, f"pos:{self.seed}:{len(self.schedule) + 1}", self.mode))
        return self.schedule[slot - 1]

    def on_slot(self) -> None:
        self.slot += 1
        chosen = self.leader(self.slot)
        if chosen == self.members.index(self.node_id):
            tip = self.tip
            block = NakamotoBlock(tip, self.tree.nodes[tip].height + 1, self.node_id,
                                  self.slot * self.slot_ticks, self.pick_transactions(tip), self.slot)
            self.mined += 1
            self.broadcast(Staked(block, self.sign(block.digest)))
            self.receive(block)
        self.set_timer("slot", self.slot_ticks)

    def on_staked(self, m: Staked, src) -> None:
        b = m.block
        if b.proposer != src or not self.verify(src, b.digest, m.auth):
            self.metrics.bump("dropped_invalid")
            return
        # the schedule is common knowledge, so a block from the wrong validator is refused
        if b.slot < 1 or self.leader(b.slot) != self.members.index(src):
            self.metrics.bump("dropped_invalid")
            return
        self.receive(b)


class Authority(Replica):
    """PoA: authorities take turns proposing; a block is final once a majority signed it."""

    def __init__(self, node_id, ctx, authorities, **kw):
        super().__init__(node_id, ctx, **kw)
        self.authorities = tuple(authorities)
        self.slot_ticks = int(ctx.knobs.get("slot", 100))
        self.height = 0
        self.attempt = 0
        self.tip_digest = ZERO_DIGEST
        self.proposals: dict[bytes, NakamotoBlock] = {}
        self.votes: dict[bytes, dict] = {}
        self.voted: set = set()
        self.pool: dict = {}
        self.handlers = {
            PoaProposal: self.on_proposal,
            PoaVote: self.on_vote,
            Request: lambda m, src: self.on_request(m.tx, src),
        }

    def dispatch(self, inp):
        if isinstance(inp, Deliver):
            self.handle(inp.payload, inp.src)
        elif isinstance(inp, TimerFire):
            self.on_slot(inp.timer_id)
        elif isinstance(inp, ClientRequest):
            self.on_request(inp.tx, None)

    def handle(self, msg, src) -> None:
        h = self.handlers.get(type(msg))
        if h is None:
            self.metrics.bump("dropped_unknown")
            return
        h(msg, src)

    def proposer(self, height: int, attempt: int):
        return self.authorities[(height + attempt) % len(self.authorities)]

    def on_request(self, tx: Transaction, src) -> None:
        if not self.tx_valid(tx):
            self.metrics.bump("bad_client_auth")
            return
        res = self.results.get(tx.key)
        if res is not None:
            if isinstance(src, str):
                self.reply(0, 0, tx, res)
            return
        self.pool.setdefault(tx.key, tx)
        self.try_propose()

    def try_propose(self) -> None:
        h = self.height + 1
        if self.node_id not in self.authorities or self.proposer(h, self.attempt) != self.node_id:
            return
        if ("proposed", h, self.attempt) in self.voted or not self.pool:
            return
        self.voted.add(("proposed", h, self.attempt))
        batch = tuple(list(self.pool.values())[: self.ctx.batch_size])
        block = NakamotoBlock(self.tip_digest, h, self.node_id, 0, batch, self.attempt)
        p = PoaProposal(block, self.sign(block.digest))
        self.broadcast(p)
        self.on_proposal(p, self.node_id)

    def arm(self) -> None:
        if self.pool:
            self.set_timer(("slot", self.height, self.attempt), self.slot_ticks)

    def on_slot(self, tid) -> None:
        _, h, attempt = tid
        if h == self.height and attempt == self.attempt and self.pool:
            self.attempt += 1
            self.metrics.bump("skipped_slots")
            self.try_propose()
            self.arm()

    def on_proposal(self, p: PoaProposal, src) -> None:
        b = p.block
        if b.height != self.height + 1 or b.parent != self.tip_digest:
            return
        if src != self.proposer(b.height, b.slot) or b.proposer != src or not self.verify(src, b.digest, p.auth):
            self.metrics.bump("dropped_invalid")
            return
        if not all(self.tx_valid(tx) for tx in b.transactions):
            self.metrics.bump("dropped_invalid")
            return
        d = b.digest
        self.proposals[d] = b
        for tx in b.transactions:
            self.pool.setdefault(tx.key, tx)
        if self.node_id in self.authorities and ("vote", b.height) not in self.voted:
            self.voted.add(("vote", b.height))
            v = PoaVote(d, self.sign(d))
            self.broadcast(v, self.members)
            self.on_vote(v, self.node_id)
        else:
            self.check(d)
        self.arm()

    def on_vote(self, m: PoaVote, src) -> None:
        if m.auth.signer != str(src):
            return
        self.votes.setdefault(m.digest, {})[src] = m.auth
        self.check(m.digest)

    def check(self, d: bytes) -> None:
        b = self.proposals.get(d)
        if b is None or b.height != self.height + 1:
            return
        if poa_validate(d, self.votes.get(d, {}).values(), self.authorities, self.keyring) is not PoaVerdict.ACCEPTED:
            return
        self.height = b.height
        self.tip_digest = d
        self.attempt = 0
        for tx in b.transactions:
            self.pool.pop(tx.key, None)
        self.apply_batch(b.transactions, b.proposer, b.height)
        self.try_propose()
        self.arm()


__all__ = [
    "MAX_TARGET", "Exhausted", "pow_digest", "pow_valid", "pow_mine", "ForkTree", "TreeNode",
    "fork_choice", "confirmation_depth", "NotOnCanonicalChain", "ZeroTotalWeight", "Mode",
    "Validator", "accrue", "pos_select", "validators_from", "PoaVerdict", "poa_validate",
    "NakamotoBlock", "Mined", "Staked", "PoaProposal", "PoaVote", "Miner", "Staker", "Authority",
]
