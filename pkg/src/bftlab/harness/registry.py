"""Turn a ScenarioConfig into replica and client automata for the chosen protocol."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from ..client import ALL, PRIMARY, Client
from ..crypto import Keyring
from ..ledger import Transaction
from ..protocols.common import ProtocolContext
from ..simnet import AdversarySpec, Equivocate, NetworkModel
from .config import ScenarioConfig

#: client timeout as a multiple of the mean one-way delay, per protocol
CLIENT_TIMEOUT_FACTOR = {"rcc": 20, "hotstuff": 30, "geobft": 30, "rbft": 20}
DEFAULT_CLIENT_TIMEOUT_FACTOR = 10


@dataclass
class Deployment:
    replicas: dict
    clients: dict
    network: NetworkModel
    adversary: AdversarySpec
    faulty: frozenset
    grace: int
    reply_types: tuple = ()
    stop: Optional[Callable] = None
    chain_of: Callable = field(default=lambda a: a.chain.freeze())
    extra: Optional[Callable] = None
    bind: Optional[Callable] = None

    def extra_metrics(self, sim) -> dict:
        return self.extra(sim) if self.extra is not None else {}


def client_names(cfg: ScenarioConfig) -> list[str]:
    return [f"c{i}" for i in range(cfg.clients)]


def forger(keyring: Keyring):
    """Transactions a Byzantine replica can mint under its own client identity."""

    def forge(node, seq: int) -> Transaction:
        name = f"z{node}"
        keyring.add(name)
        payload = f"SET forged {name}:{seq}".encode()
        body = Transaction(name, seq, payload, ()).signing_bytes()
        return Transaction(name, seq, payload, (keyring.sign(name, body),))

    return forge


def default_adversary(cfg: ScenarioConfig) -> AdversarySpec:
    behaviors = {}
    for r, b in cfg.adversary.items():
        if isinstance(b, Equivocate) and b.targets is None and isinstance(r, int):
            others = [m for m in range(cfg.n) if m != r]
            b = replace(b, targets=tuple(others[: len(others) // 2]))
        behaviors[r] = b
    return AdversarySpec(behaviors)


def context(cfg: ScenarioConfig, keyring: Keyring, members=None, f=None, domain=None, **kw) -> ProtocolContext:
    members = tuple(range(cfg.n)) if members is None else tuple(members)
    for m in members:
        keyring.add(m)
    knobs = dict(cfg.knobs)
    knobs["forge"] = forger(keyring)
    return ProtocolContext(
        keyring=keyring, members=members, f=cfg.f if f is None else f, c=cfg.c,
        clients=frozenset(client_names(cfg)), mean_delay=cfg.mean_delay,
        batch_size=cfg.batch_size, window=cfg.window, domain=domain or cfg.protocol,
        dual_sign=cfg.dual_sign, knobs=knobs, **kw,
    )


def client_timeout(cfg: ScenarioConfig) -> int:
    if cfg.client_timeout is not None:
        return cfg.client_timeout
    return int(CLIENT_TIMEOUT_FACTOR.get(cfg.protocol, DEFAULT_CLIENT_TIMEOUT_FACTOR) * cfg.mean_delay)


def make_clients(cfg: ScenarioConfig, keyring: Keyring, need: int, cls=Client, replicas=None, target=PRIMARY,
                 primary_for=None, **kw) -> dict:
    replicas = tuple(range(cfg.n)) if replicas is None else tuple(replicas)
    out = {}
    for i, name in enumerate(client_names(cfg)):
        pf = primary_for(i) if callable(primary_for) and getattr(primary_for, "per_client", False) else primary_for
        out[name] = cls(name, keyring, replicas, need, requests=cfg.requests, timeout=client_timeout(cfg),
                        target=target, primary_for=pf, dual_sign=cfg.dual_sign, domain=cfg.protocol, **kw)
    return out


def per_client(fn):
    fn.per_client = True
    return fn


def base(cfg: ScenarioConfig, replicas: dict, clients: dict, **kw) -> Deployment:
    adv = default_adversary(cfg)
    return Deployment(
        replicas=replicas, clients=clients, network=cfg.network(), adversary=adv,
        faulty=frozenset(cfg.faulty_replicas()), grace=int(kw.pop("grace_factor", 60) * cfg.mean_delay), **kw,
    )


BUILDERS: dict[str, Callable[[ScenarioConfig, Keyring], Deployment]] = {}


def builder(name: str):
    def register(fn):
        BUILDERS[name] = fn
        return fn

    return register


def build(cfg: ScenarioConfig) -> Deployment:
    keyring = Keyring(f"keys:{cfg.seed}".encode())
    return BUILDERS[cfg.protocol](cfg, keyring)


@builder("pbft")
def build_pbft(cfg, keyring):
    from ..protocols.pbft import PBFT

    ctx = context(cfg, keyring)
    replicas = {r: PBFT(r, ctx) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, cfg.f + 1)
    return base(cfg, replicas, clients)


@builder("sbft")
def build_sbft(cfg, keyring):
    from ..protocols.sbft import SBFT, SbftClient

    ctx = context(cfg, keyring)
    replicas = {r: SBFT(r, ctx) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, cfg.f + 1, cls=SbftClient, f=cfg.f)
    return base(cfg, replicas, clients, reply_types=("ExecAck",))


@builder("poe")
def build_poe(cfg, keyring):
    from ..protocols.poe import PoE

    ctx = context(cfg, keyring)
    ctx.window = int(cfg.knobs.get("w", 4))
    replicas = {r: PoE(r, ctx) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, 2 * cfg.f + 1)
    return base(cfg, replicas, clients)


@builder("zyzzyva")
def build_zyzzyva(cfg, keyring):
    from ..protocols.zyzzyva import Zyzzyva, ZyzzyvaClient

    ctx = context(cfg, keyring)
    replicas = {r: Zyzzyva(r, ctx) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, 3 * cfg.f + 1, cls=ZyzzyvaClient, f=cfg.f)
    return base(cfg, replicas, clients, reply_types=("SpecResponse", "LocalCommit"))


@builder("hotstuff")
def build_hotstuff(cfg, keyring):
    from ..protocols.hotstuff import HotStuff

    ctx = context(cfg, keyring)
    replicas = {r: HotStuff(r, ctx) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, cfg.f + 1, target=ALL)
    return base(cfg, replicas, clients)


@builder("rcc")
def build_rcc(cfg, keyring):
    from ..protocols.multiconsensus import RCC, rcc_instance, rcc_leader

    ctx = context(cfg, keyring)
    replicas = {r: RCC(r, ctx, cfg.z) for r in range(cfg.n)}
    members = tuple(range(cfg.n))

    @per_client
    def primary_for(i):
        return rcc_leader(members, rcc_instance(f"c{i}", cfg.z), cfg.z)

    clients = make_clients(cfg, keyring, cfg.f + 1, primary_for=primary_for)
    return base(cfg, replicas, clients)


@builder("rbft")
def build_rbft(cfg, keyring):
    from ..protocols.multiconsensus import RBFT

    ctx = context(cfg, keyring)
    replicas = {r: RBFT(r, ctx) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, cfg.f + 1, target=ALL)

    def extra(sim):
        return {"instance_changes": max(a.epoch for a in sim.dep.replicas.values())}

    return base(cfg, replicas, clients, extra=extra)


@builder("geobft")
def build_geobft(cfg, keyring):
    from ..protocols.multiconsensus import GeoBFT, cluster_members

    sizes = cfg.clusters or (cfg.n,)
    groups = cluster_members(sizes)

    def cluster_of_client(name: str) -> int:
        return int(name[1:]) % len(groups) if name[1:].isdigit() else 0

    ctx = context(cfg, keyring)
    ctx.knobs["cluster_of_client"] = cluster_of_client
    replicas = {r: GeoBFT(r, ctx, groups) for r in range(cfg.n)}
    clients = {}
    for i, name in enumerate(client_names(cfg)):
        local = groups[cluster_of_client(name)]
        clients[name] = Client(name, keyring, local, cfg.f + 1, requests=cfg.requests,
                               timeout=client_timeout(cfg), target=PRIMARY,
                               primary_for=lambda v, local=local: local[v % len(local)],
                               dual_sign=cfg.dual_sign, domain=cfg.protocol)
    return base(cfg, replicas, clients)


def _clock(holder: dict):
    return lambda: holder["sim"].net.now if "sim" in holder else 0


def _bind(holder: dict):
    def bind(sim):
        holder["sim"] = sim

    return bind


def _stop_at_height(blocks: Optional[int]):
    if not blocks:
        return None

    def stop(sim) -> bool:
        return any(a.tree.nodes[a.tip].height >= blocks for a in sim.dep.replicas.values())

    return stop


def _chain_stats(sim) -> dict:
    reps = [a for r, a in sim.dep.replicas.items() if r not in sim.dep.faulty] or list(sim.dep.replicas.values())
    ref = max(reps, key=lambda a: (a.tree.nodes[a.tip].height, -a.node_id))
    return {
        "fork_rate": ref.fork_rate(),
        "height": ref.tree.nodes[ref.tip].height,
        "blocks_total": len(ref.blocks),
        "winners": {str(k): v for k, v in sorted(ref.winners().items())},
    }


@builder("pow")
def build_pow(cfg, keyring):
    from ..protocols.permissionless import Miner

    holder: dict = {}
    ctx = context(cfg, keyring, f=0)
    ctx.knobs["clock"] = _clock(holder)
    shares = cfg.knobs.get("hash_power") or [1.0 / cfg.n] * cfg.n
    replicas = {r: Miner(r, ctx, float(shares[r]), seed=cfg.seed) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, 1, target=ALL)
    return base(cfg, replicas, clients, chain_of=lambda a: a.canonical_chain(), extra=_chain_stats,
                stop=_stop_at_height(cfg.knobs.get("blocks")), bind=_bind(holder),
                grace_factor=cfg.knobs.get("grace_factor", 60))


@builder("pos")
def build_pos(cfg, keyring):
    from ..protocols.permissionless import Mode, Staker

    ctx = context(cfg, keyring, f=0)
    stakes = cfg.knobs.get("stakes") or [1] * cfg.n
    mode = Mode(cfg.knobs.get("mode", "stake"))
    replicas = {r: Staker(r, ctx, stakes, seed=cfg.seed, mode=mode) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, 1, target=ALL)
    return base(cfg, replicas, clients, chain_of=lambda a: a.canonical_chain(), extra=_chain_stats,
                stop=_stop_at_height(cfg.knobs.get("blocks")))


@builder("poa")
def build_poa(cfg, keyring):
    from ..protocols.permissionless import Authority

    ctx = context(cfg, keyring, f=0)
    auth = tuple(cfg.knobs.get("auth_set") or range(cfg.n))
    replicas = {r: Authority(r, ctx, auth) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, 1, target=ALL)
    return base(cfg, replicas, clients)


@builder("bft_pos")
def build_bft_pos(cfg, keyring):
    from ..protocols.pbft import PBFT
    from ..protocols.permissionless import Mode, pos_select, validators_from

    stakes = cfg.knobs.get("stakes") or [1] * cfg.n
    validators = validators_from(stakes)

    def leader(view: int) -> int:
        return pos_select(validators, f"bftpos:{cfg.seed}:{view}", Mode.STAKE)

    ctx = context(cfg, keyring, leader=leader)
    replicas = {r: PBFT(r, ctx) for r in range(cfg.n)}
    clients = make_clients(cfg, keyring, cfg.f + 1, primary_for=leader)
    return base(cfg, replicas, clients)
