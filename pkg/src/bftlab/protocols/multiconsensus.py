"""Compositions of several PBFT instances inside one replica automaton.

* RCC runs ``z`` instances with distinct primaries in parallel. Round ``k`` is
  complete once every instance decided its slot ``k``; the round's block is
  the instances' batches in ascending instance order. Idle instances fill
  their slots with empty proposals so rounds keep closing.
* RBFT runs ``f+1`` instances over the same requests. Only the master
  (instance 0) executes; the others exist to measure how fast the master
  should be going. A replica that sees the master fall behind votes for an
  instance change, which replaces every instance's primary.
* GeoBFT runs one PBFT instance per cluster. Each locally committed slot is
  shipped with its commit certificate to ``f+1`` replicas of every other
  cluster, which re-broadcast it locally. Rounds are executed in cluster order
  and replicas answer only the clients of their own cluster.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .. import codec
from ..codec import frame
from ..crypto import Authenticator, verify_quorum
from ..ledger import Transaction, batch_digest
from ..runtime import (
    Broadcast, ClientRequest, Commit, Deliver, Reply, Send, TimerFire,
)
from .base import unpack_auths
from .common import ProtocolContext, Replica, Request
from .pbft import PBFT


@frame(60)
@dataclass(frozen=True)
class Tagged:
    instance: int
    inner: Any


@frame(61)
@dataclass(frozen=True)
class Propagate:
    tx: Transaction


@frame(62)
@dataclass(frozen=True)
class InstanceChange:
    epoch: int
    replica: int
    auth: Authenticator


@frame(63)
@dataclass(frozen=True)
class GlobalShare:
    cluster: int
    seq: int
    view: int
    digest: bytes
    batch: tuple[Transaction, ...]
    cert: bytes


@frame(64)
@dataclass(frozen=True)
class LocalShare:
    share: GlobalShare


@frame(65)
@dataclass(frozen=True)
class ShareRequest:
    cluster: int
    seq: int


class InvalidCertificate(ValueError):
    pass


class MultiInstance(Replica):
    """Hosts PBFT instances, wraps their traffic in ``Tagged`` and collects their decisions."""

    def __init__(self, node_id, ctx: ProtocolContext, **kw):
        super().__init__(node_id, ctx, **kw)
        self.instances: dict[int, PBFT] = {}
        self.decided: dict[int, dict[int, tuple]] = {}
        self.handlers: dict = {Tagged: self.on_tagged, Request: self.on_request_msg}

    def add_instance(self, i: int, inst: PBFT) -> None:
        self.instances[i] = inst
        self.decided[i] = {}

    # -- plumbing --
    def dispatch(self, inp):
        if isinstance(inp, Deliver):
            self.handle(inp.payload, inp.src)
        elif isinstance(inp, TimerFire):
            tid = inp.timer_id
            if isinstance(tid, tuple) and tid and isinstance(tid[0], str) and tid[0].startswith("i"):
                i = int(tid[0][1:])
                self.absorb(i, self.instances[i].step(inp))
            else:
                self.on_own_timer(tid)
        elif isinstance(inp, ClientRequest):
            self.on_request(inp.tx, None)

    def handle(self, msg, src) -> None:
        h = self.handlers.get(type(msg))
        if h is None:
            self.metrics.bump("dropped_unknown")
            return
        h(msg, src)

    def on_tagged(self, m: Tagged, src) -> None:
        inst = self.instances.get(m.instance)
        if inst is None:
            self.metrics.bump("dropped_unknown")
            return
        self.absorb(m.instance, inst.step(Deliver(m.inner, src)))

    def call(self, i: int, fn: Callable, *args) -> None:
        inst = self.instances[i]
        inst._out = []
        fn(*args)
        out, inst._out = inst._out, []
        self.absorb(i, out)

    def absorb(self, i: int, outputs) -> None:
        for o in outputs:
            if isinstance(o, Send):
                self._out.append(Send(o.dst, Tagged(i, o.payload)))
            elif isinstance(o, Broadcast):
                self._out.append(Broadcast(Tagged(i, o.payload), o.dsts))
            elif isinstance(o, Commit):
                self.decided[i][o.seq] = (o.block.view, o.block.transactions)
                self.on_instance_decided(i, o.seq, o.block.transactions)
            elif isinstance(o, Reply):
                pass
            else:
                self._out.append(o)

    def equivocate(self, payload):
        if isinstance(payload, Tagged) and payload.instance in self.instances:
            alt = self.instances[payload.instance].equivocate(payload.inner)
            return None if alt is None else Tagged(payload.instance, alt)
        return None

    # -- hooks --
    def on_request_msg(self, m: Request, src) -> None:
        self.on_request(m.tx, src)

    def on_request(self, tx: Transaction, src) -> None:
        raise NotImplementedError

    def on_instance_decided(self, i: int, seq: int, batch) -> None:
        raise NotImplementedError

    def on_own_timer(self, tid) -> None:
        pass

    def answer_duplicate(self, tx: Transaction, src) -> bool:
        res = self.results.get(tx.key)
        if res is None:
            return False
        if isinstance(src, str):
            self.reply(0, 0, tx, res)
        return True

    def inspect(self) -> dict:
        d = super().inspect()
        d["instances"] = {i: inst.inspect() for i, inst in self.instances.items()}
        return d


class RoundBased(MultiInstance):
    """Shared round logic for RCC and GeoBFT: noop filling, stall detection, ordered execution."""

    def __init__(self, node_id, ctx: ProtocolContext, **kw):
        super().__init__(node_id, ctx, **kw)
        self.round = 0
        self.horizon = 0
        self.stall_armed: set = set()

    def stall_timeout(self, i: int) -> int:
        inst = self.instances[i]
        return inst.timeout(inst.view)

    def raise_horizon(self, seq: int) -> None:
        if seq > self.horizon:
            self.horizon = seq
        self.fill()

    def fill(self) -> None:
        """Local primaries pad idle slots; backups watch instances that lag behind the horizon."""
        for i, inst in self.instances.items():
            if inst.is_primary() and inst.next_seq <= self.horizon:
                self.call(i, inst.propose_noops, self.horizon)
            if inst.last_executed < self.horizon and i not in self.stall_armed:
                self.stall_armed.add(i)
                self.set_timer(("stall", i, inst.last_executed), self.stall_timeout(i))

    def on_own_timer(self, tid) -> None:
        if isinstance(tid, tuple) and tid[0] == "stall":
            _, i, at = tid
            self.stall_armed.discard(i)
            inst = self.instances[i]
            if inst.last_executed == at and inst.vc_view is None and at < self.horizon:
                self.metrics.bump("instance_stalls")
                self.call(i, inst.start_view_change, inst.view + 1)
            self.fill()

    def round_batches(self, k: int):
        """Batches of round ``k`` in instance order, or None while some are missing."""
        raise NotImplementedError

    def try_rounds(self) -> None:
        while True:
            parts = self.round_batches(self.round + 1)
            if parts is None:
                return
            self.round += 1
            batch = tuple(tx for part in parts for tx in part)
            self.execute_round(self.round, batch)

    def execute_round(self, k: int, batch: tuple) -> None:
        self.apply_batch(batch, None, k)


class RCC(RoundBased):
    """``z`` concurrent PBFT instances; instance ``i`` starts under replica ``i``."""

    def __init__(self, node_id, ctx: ProtocolContext, z: int, **kw):
        super().__init__(node_id, ctx, **kw)
        self.z = z
        members = self.members
        for i in range(z):
            sub = ProtocolContext(
                keyring=ctx.keyring, members=members, f=ctx.f, c=ctx.c, clients=ctx.clients,
                mean_delay=ctx.mean_delay, batch_size=ctx.batch_size, window=ctx.window,
                domain=f"{ctx.domain}:{i}", request_timeout_factor=ctx.request_timeout_factor,
                dual_sign=ctx.dual_sign, leader=rcc_leader(members, i, z), knobs=ctx.knobs,
            )
            self.add_instance(i, PBFT(node_id, sub, execute=False, tag=f"i{i}"))

    def instance_for(self, client: str) -> int:
        return rcc_instance(client, self.z)

    def on_request(self, tx: Transaction, src) -> None:
        if self.answer_duplicate(tx, src):
            return
        i = self.instance_for(tx.client_id)
        inst = self.instances[i]
        self.call(i, inst.on_request, tx, src)
        self.fill_from_instances()

    def fill_from_instances(self) -> None:
        top = 0
        for inst in self.instances.values():
            for (view, seq), _ in inst.accepted.items():
                slot = inst.slots.get(seq)
                if slot is not None and slot.batch:
                    top = max(top, seq)
        self.raise_horizon(top)

    def on_tagged(self, m: Tagged, src) -> None:
        super().on_tagged(m, src)
        self.fill_from_instances()

    def on_instance_decided(self, i: int, seq: int, batch) -> None:
        if batch:
            self.raise_horizon(seq)
        self.try_rounds()

    def round_batches(self, k: int):
        parts = []
        for i in range(self.z):
            entry = self.decided[i].get(k)
            if entry is None:
                return None
            parts.append(entry[1])
        return parts


def rcc_leader(members, i: int, z: int):
    """Primary of view ``v`` of instance ``i``; views step by ``z`` so instances keep distinct primaries."""
    n = len(members)
    return lambda v: members[(i + v * z) % n]


def rcc_instance(client: str, z: int) -> int:
    return int(client[1:]) % z if client[1:].isdigit() else 0


class ThroughputMonitor:
    """Per-instance decision counts over fixed windows."""

    def __init__(self, instances: int, window: int, ratio: float):
        if not 0 < ratio < 1:
            raise ValueError("degradation ratio must lie in (0, 1)")
        self.window = window
        self.ratio = ratio
        self.counts = [0] * instances

    def record(self, instance: int, decided: int) -> None:
        self.counts[instance] += decided

    def degraded(self) -> bool:
        master, backups = self.counts[0], self.counts[1:]
        return bool(backups) and max(backups) * self.ratio > master

    def reset(self) -> None:
        self.counts = [0] * len(self.counts)


class RBFT(MultiInstance):
    def __init__(self, node_id, ctx: ProtocolContext, **kw):
        super().__init__(node_id, ctx, **kw)
        members = self.members
        count = self.f + 1
        for i in range(count):
            sub = ProtocolContext(
                keyring=ctx.keyring, members=members, f=ctx.f, c=ctx.c, clients=ctx.clients,
                mean_delay=ctx.mean_delay, batch_size=ctx.batch_size, window=ctx.window,
                domain=f"{ctx.domain}:{i}", request_timeout_factor=ctx.request_timeout_factor,
                dual_sign=ctx.dual_sign, knobs=ctx.knobs,
            )
            self.add_instance(i, PBFT(node_id, sub, execute=False, offset=i, tag=f"i{i}"))
        window = int(ctx.knobs.get("monitor_window", 1000))
        ratio = float(ctx.knobs.get("degradation_ratio", 0.9))
        self.monitor = ThroughputMonitor(count, window, ratio)
        self.monitor_armed = False
        self.propagated: dict = {}
        self.delivered: set = set()
        self.epoch = 0
        self.change_votes: dict[int, set] = {}
        self.voted: set = set()
        self.master_next = 1
        self.handlers.update({Propagate: self.on_propagate, InstanceChange: self.on_instance_change})

    def change_bytes(self, epoch: int) -> bytes:
        return codec.pack(self.domain, "instance-change", epoch)

    # -- propagation --
    def on_request(self, tx: Transaction, src) -> None:
        if not self.tx_valid(tx):
            self.metrics.bump("bad_client_auth")
            return
        if self.answer_duplicate(tx, src):
            return
        seen = self.propagated.setdefault(tx.key, set())
        if self.node_id not in seen:
            seen.add(self.node_id)
            self.broadcast(Propagate(tx))
        self.check_propagated(tx)

    def on_propagate(self, m: Propagate, src) -> None:
        if not self.tx_valid(m.tx):
            self.metrics.bump("bad_client_auth")
            return
        seen = self.propagated.setdefault(m.tx.key, set())
        seen.add(src)
        if self.node_id not in seen and m.tx.key not in self.results:
            seen.add(self.node_id)
            self.broadcast(Propagate(m.tx))
        self.check_propagated(m.tx)

    def check_propagated(self, tx: Transaction) -> None:
        if tx.key in self.delivered or len(self.propagated.get(tx.key, ())) < self.f + 1:
            return
        self.delivered.add(tx.key)
        for i, inst in self.instances.items():
            self.call(i, inst.on_request, tx, None, False)
        self.arm_monitor()

    # -- execution --
    def on_instance_decided(self, i: int, seq: int, batch) -> None:
        self.monitor.record(i, len(batch))
        if i != 0:
            return
        while self.master_next in self.decided[0]:
            view, txs = self.decided[0].pop(self.master_next)
            self.master_next += 1
            self.apply_batch(txs, self.instances[0].primary(view), view)

    # -- monitoring --
    def pending(self) -> bool:
        return any(k not in self.results for k in self.delivered)

    def arm_monitor(self) -> None:
        if not self.monitor_armed:
            self.monitor_armed = True
            self.set_timer("monitor", self.monitor.window)

    def on_own_timer(self, tid) -> None:
        if tid != "monitor":
            return
        self.monitor_armed = False
        if self.monitor.degraded() and self.epoch + 1 not in self.voted:
            self.metrics.bump("degradation_detected")
            self.vote_change(self.epoch + 1)
        self.monitor.reset()
        if self.pending():
            self.arm_monitor()

    def vote_change(self, epoch: int) -> None:
        self.voted.add(epoch)
        m = InstanceChange(epoch, self.node_id, self.sign(self.change_bytes(epoch)))
        self.broadcast(m)
        self.on_instance_change(m, self.node_id)

    def on_instance_change(self, m: InstanceChange, src) -> None:
        if m.replica != src or m.epoch <= self.epoch:
            return
        if not self.verify(src, self.change_bytes(m.epoch), m.auth):
            self.metrics.bump("dropped_invalid")
            return
        votes = self.change_votes.setdefault(m.epoch, set())
        votes.add(src)
        if len(votes) >= self.f + 1 and m.epoch not in self.voted:
            self.vote_change(m.epoch)
            return
        if len(votes) >= 2 * self.f + 1:
            self.epoch = m.epoch
            self.metrics.bump("instance_changes")
            for i, inst in self.instances.items():
                if inst.vc_view is None:
                    self.call(i, inst.start_view_change, inst.view + 1)

    def inspect(self) -> dict:
        d = super().inspect()
        d["epoch"] = self.epoch
        return d


class GeoBFT(RoundBased):
    """One PBFT instance per cluster; this replica takes part in its own cluster's instance only."""

    def __init__(self, node_id, ctx: ProtocolContext, clusters: tuple, **kw):
        super().__init__(node_id, ctx, **kw)
        self.clusters = tuple(tuple(c) for c in clusters)
        self.cluster = next(k for k, c in enumerate(self.clusters) if node_id in c)
        local = self.clusters[self.cluster]
        sub = ProtocolContext(
            keyring=ctx.keyring, members=local, f=ctx.f, c=ctx.c, clients=ctx.clients,
            mean_delay=ctx.mean_delay, batch_size=ctx.batch_size, window=ctx.window,
            domain=cluster_domain(ctx.domain, self.cluster), request_timeout_factor=ctx.request_timeout_factor,
            dual_sign=ctx.dual_sign, knobs=ctx.knobs,
        )
        self.local = PBFT(node_id, sub, execute=False, tag=f"i{self.cluster}")
        self.add_instance(self.cluster, self.local)
        self.shares: dict[int, dict[int, GlobalShare]] = {k: {} for k in range(len(self.clusters))}
        self.requested: set = set()
        self.shared_upto = 0
        self.local_view = 0
        self.handlers.update({
            GlobalShare: self.on_global_share,
            LocalShare: self.on_local_share,
            ShareRequest: self.on_share_request,
        })

    def receivers(self, k: int) -> tuple:
        """The f+1 lowest-id replicas of cluster ``k``."""
        return tuple(sorted(self.clusters[k])[: self.f + 1])

    def on_request(self, tx: Transaction, src) -> None:
        if self.answer_duplicate(tx, src):
            return
        self.call(self.cluster, self.local.on_request, tx, src)

    def on_tagged(self, m: Tagged, src) -> None:
        super().on_tagged(m, src)
        if self.local.view != self.local_view:
            self.local_view = self.local.view
            if self.local.is_primary():
                # a new primary re-ships every slot the remote clusters may still miss
                for seq in sorted(self.shares[self.cluster]):
                    if seq > self.round:
                        self.ship(self.shares[self.cluster][seq])
        top = max((seq for (view, seq) in self.local.accepted
                   if self.local.slots.get(seq) is not None and self.local.slots[seq].batch), default=0)
        self.raise_horizon(top)

    def on_instance_decided(self, i: int, seq: int, batch) -> None:
        view, digest, cert = self.local.commit_certs[seq]
        share = GlobalShare(self.cluster, seq, view, digest, tuple(batch), cert)
        self.shares[self.cluster][seq] = share
        if self.local.is_primary():
            self.ship(share)
        if batch:
            self.raise_horizon(seq)
        self.try_rounds()
        self.watch_remote()

    def ship(self, share: GlobalShare) -> None:
        for k in range(len(self.clusters)):
            if k != self.cluster:
                self.broadcast(share, self.receivers(k))

    # -- global sharing --
    def check_share(self, s: GlobalShare) -> None:
        if not 0 <= s.cluster < len(self.clusters):
            raise InvalidCertificate("unknown cluster")
        if batch_digest(s.batch) != s.digest:
            raise InvalidCertificate("batch does not match digest")
        if not all(self.tx_valid(tx) for tx in s.batch):
            raise InvalidCertificate("bad client signature")
        msg = codec.pack(cluster_domain(self.domain, s.cluster), "commit", s.view, s.seq, s.digest)
        if not verify_quorum(self.keyring, msg, unpack_auths(s.cert), self.clusters[s.cluster], 2 * self.f + 1):
            raise InvalidCertificate("commit certificate does not verify")

    def store_share(self, s: GlobalShare) -> bool:
        if s.cluster == self.cluster or s.seq in self.shares[s.cluster]:
            return False
        try:
            self.check_share(s)
        except InvalidCertificate:
            self.metrics.bump("invalid_certificates")
            return False
        self.shares[s.cluster][s.seq] = s
        if s.batch:
            self.raise_horizon(s.seq)
        self.try_rounds()
        self.watch_remote()
        return True

    def on_global_share(self, s: GlobalShare, src) -> None:
        if src in self.clusters[self.cluster]:
            return
        if self.store_share(s):
            self.broadcast(LocalShare(s), self.clusters[self.cluster])

    def on_local_share(self, m: LocalShare, src) -> None:
        if src not in self.clusters[self.cluster]:
            return
        self.store_share(m.share)

    def on_share_request(self, m: ShareRequest, src) -> None:
        s = self.shares[self.cluster].get(m.seq) if m.cluster == self.cluster else None
        if s is not None:
            self.send(src, s)

    def watch_remote(self) -> None:
        k = self.round + 1
        if k > self.horizon or ("remote", k) in self.requested:
            return
        self.requested.add(("remote", k))
        self.set_timer(("remote", k), self.stall_timeout(self.cluster))

    def on_own_timer(self, tid) -> None:
        if isinstance(tid, tuple) and tid[0] == "remote":
            k = tid[1]
            if self.round < k:
                for c in range(len(self.clusters)):
                    if c != self.cluster and k not in self.shares[c]:
                        self.metrics.bump("share_requests")
                        self.broadcast(ShareRequest(c, k), self.clusters[c])
                self.requested.discard(("remote", k))
                self.watch_remote()
            return
        super().on_own_timer(tid)

    def round_batches(self, k: int):
        parts = []
        for c in range(len(self.clusters)):
            s = self.shares[c].get(k)
            if s is None:
                return None
            parts.append(s.batch)
        return parts

    def execute_round(self, k: int, batch: tuple) -> None:
        results = self.apply_batch(batch, None, k, reply=False)
        local = self.ctx.knobs.get("cluster_of_client")
        for tx, res in zip(batch, results):
            if local is None or local(tx.client_id) == self.cluster:
                self.reply(k, self.round, tx, res)


def cluster_domain(domain: str, k: int) -> str:
    return f"{domain}:{k}"


def cluster_members(sizes) -> tuple:
    out, base = [], 0
    for size in sizes:
        out.append(tuple(range(base, base + size)))
        base += size
    return tuple(out)


__all__ = [
    "Tagged", "Propagate", "InstanceChange", "GlobalShare", "LocalShare", "ShareRequest",
    "InvalidCertificate", "MultiInstance", "RCC", "RBFT", "GeoBFT", "ThroughputMonitor",
    "rcc_leader", "rcc_instance", "cluster_members", "cluster_domain",
]
