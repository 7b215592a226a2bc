from dataclasses import replace

import pytest

from bftlab.ledger import batch_digest
from bftlab.protocols.multiconsensus import (
    GeoBFT, GlobalShare, ThroughputMonitor, cluster_domain, cluster_members, rcc_instance, rcc_leader,
)
from bftlab.simnet import Constant, Custom, Delay, Mute, script
from conftest import make_ctx, make_tx, run, run_keep


def test_rcc_leaders_stay_distinct_across_views():
    members = tuple(range(7))
    for v in range(10):
        leaders = [rcc_leader(members, i, 3)(v) for i in range(3)]
        assert len(set(leaders)) == 3
    assert rcc_leader(members, 1, 2)(0) == 1 and rcc_leader(members, 1, 2)(1) == 3


def test_rcc_client_assignment():
    assert [rcc_instance(f"c{i}", 2) for i in range(4)] == [0, 1, 0, 1]
    assert rcc_instance("odd", 3) == 0


def test_cluster_layout():
    assert cluster_members((4, 4)) == ((0, 1, 2, 3), (4, 5, 6, 7))
    assert cluster_domain("geobft", 1) == "geobft:1"


def test_throughput_monitor():
    m = ThroughputMonitor(2, 1000, 0.9)
    m.record(0, 10)
    m.record(1, 10)
    assert not m.degraded()
    m.record(1, 2)
    assert m.degraded()
    m.reset()
    assert m.counts == [0, 0]
    with pytest.raises(ValueError):
        ThroughputMonitor(2, 10, 1.5)


def test_rcc_round_block_orders_instances():
    report, sim = run_keep("rcc", z=2, clients=2, requests=1)
    a = sim.dep.replicas[2]
    txs = [tx.client_id for b in a.chain.blocks[1:] for tx in b.transactions]
    assert txs == ["c0", "c1"]
    assert report.ok


def test_rcc_mute_instance_primary_needs_view_change():
    r = run("rcc", z=2, clients=2, requests=5, adversary={1: Mute(0)})
    assert r.metrics["completed"] == 10 and r.ok
    assert r.metrics["view_changes"] >= 1


def test_rbft_runs_f_plus_one_instances():
    report, sim = run_keep("rbft", clients=1, requests=1)
    assert all(len(a.instances) == 2 for a in sim.dep.replicas.values())
    report, sim = run_keep("rbft", n=7, f=2, clients=1, requests=1)
    assert all(len(a.instances) == 3 for a in sim.dep.replicas.values())


def test_rbft_slow_master_replaced():
    r = run("rbft", clients=4, requests=25, adversary={0: Delay(150)},
            knobs={"monitor_window": 500})
    assert r.metrics["instance_changes"] >= 1
    assert r.metrics["completed"] == 100 and r.ok


def test_geobft_same_order_everywhere():
    report, sim = run_keep("geobft", n=8, f=1, clusters=(4, 4), clients=2, requests=3)
    orders = {tuple(tuple(b.transactions) for b in a.chain.blocks) for a in sim.dep.replicas.values()}
    assert len(orders) == 1
    first = sim.dep.replicas[0].chain.blocks[1]
    assert len(first.transactions) == 2
    assert report.ok


def test_geobft_rejects_forged_certificate():
    ctx = make_ctx(n=8, clients=("c0",), domain="geobft")
    groups = cluster_members((4, 4))
    r4 = GeoBFT(4, ctx, groups)
    batch = (make_tx(ctx.keyring),)
    bogus = GlobalShare(0, 1, 0, batch_digest(batch), batch, b"")
    r4.on_global_share(bogus, 0)
    assert r4.metrics.counters["invalid_certificates"] == 1
    assert 1 not in r4.shares[0]


@script("test_forge_first_share")
def forge_first_share(env, ctx):
    p = env.payload
    if isinstance(p, GlobalShare) and (p.seq, env.dst) not in ctx.state.setdefault("forged", set()):
        ctx.state["forged"].add((p.seq, env.dst))
        return [replace(env, payload=replace(p, cert=b""))]
    return [env]


def test_geobft_recovers_from_forged_share():
    r = run("geobft", n=8, f=1, clusters=(4, 4), clients=2, requests=2,
            adversary={0: Custom("test_forge_first_share")})
    assert r.ok and r.metrics["completed"] == 4
    reps = r.metrics["replica"]
    assert sum(m.get("invalid_certificates", 0) for m in reps.values()) >= 1
    assert sum(m.get("share_requests", 0) for m in reps.values()) >= 1


def test_geobft_locality():
    geo = run("geobft", n=8, f=1, clusters=(4, 4), clients=2, requests=5, inter_region_delay=Constant(50))
    flat = run("pbft", n=8, f=2, clients=2, requests=5, knobs={"regions": {i: i // 4 for i in range(8)}})
    rounds = geo.metrics["committed"]
    assert geo.metrics["inter_region_messages"] / rounds < flat.metrics["inter_region_messages"] / flat.metrics["committed"]
    for client, sources in geo.metrics["reply_sources"].items():
        home = int(client[1:]) % 2
        assert {int(s) // 4 for s in sources} == {home}
