from dataclasses import replace

from bftlab.harness.config import bundled
from bftlab.harness.runner import run_scenario
from bftlab.harness.safety import Violation, verify_safety
from bftlab.protocols.common import NO_AUTH, Request, signed_body
from bftlab.protocols.zyzzyva import Misbehavior, OrderReq, SpecResponse, Zyzzyva, ZyzzyvaClient, extend_history
from bftlab.ledger import ZERO_DIGEST, batch_digest
from bftlab.runtime import Broadcast, Deliver, Send, TimerFire, ViewChangeSignal
from bftlab.simnet import Crash, Equivocate
from conftest import make_ctx, make_tx, run, run_keep


def test_history_chain_oracle():
    import hashlib
    d = batch_digest(())
    assert extend_history(ZERO_DIGEST, d) == hashlib.sha3_256(ZERO_DIGEST + d).digest()


def test_primary_orders_and_responds():
    ctx = make_ctx(domain="zyzzyva")
    p = Zyzzyva(0, ctx)
    out = p.step(Deliver(Request(make_tx(ctx.keyring)), "c0"))
    [b] = [o for o in out if isinstance(o, Broadcast)]
    assert isinstance(b.payload, OrderReq)
    assert [o.dst for o in out if isinstance(o, Send) and isinstance(o.payload, SpecResponse)] == ["c0"]


def test_backup_executes_in_history_order():
    ctx = make_ctx(domain="zyzzyva")
    p, b = Zyzzyva(0, ctx), Zyzzyva(1, ctx)
    orders = []
    for nonce in range(2):
        out = p.step(Deliver(Request(make_tx(ctx.keyring, nonce=nonce)), "c0"))
        orders.append(next(o.payload for o in out if isinstance(o, Broadcast)))
    b.step(Deliver(orders[1], 0))
    assert len(b.chain) == 1
    b.step(Deliver(orders[0], 0))
    assert len(b.chain) == 3
    assert b.history[-1] == p.history[-1]


def test_fast_path_message_count():
    n = 4
    r = run("zyzzyva", n=n, f=1, clients=2, requests=10)
    by = r.metrics["messages_by_type"]
    per_request = (by["Request"] + by["OrderReq"] + by["SpecResponse"]) / 20
    assert per_request == 1 + (n - 1) + n
    assert r.metrics["completion_paths"] == {"fast": 20}


def test_one_crash_forces_slow_path():
    r = run("zyzzyva", clients=2, requests=10, adversary={2: Crash(0)})
    assert r.metrics["completion_paths"] == {"slow": 20}
    assert r.ok


def test_equivocating_primary_splits_histories():
    report, sim = run_keep("zyzzyva", clients=1, requests=2, adversary={0: Equivocate(targets=(1, 2))})
    heads = {}
    for r, a in sim.dep.replicas.items():
        heads.setdefault(a.history[1], set()).add(r)
    assert sorted(len(v) for v in heads.values()) == [2, 2]
    assert "fast" not in report.metrics["completion_paths"]


def test_conflicting_histories_raise_view_change_signal():
    ctx = make_ctx(domain="zyzzyva")
    rs = {r: Zyzzyva(r, ctx) for r in range(4)}
    client = ZyzzyvaClient("c0", ctx.keyring, range(4), 4, f=1, timeout=10, domain="zyzzyva")
    client.start()
    tx = client.state.pending

    def response(r, history):
        m = SpecResponse(0, 1, "c0", tx.nonce, b"ok", history, r, NO_AUTH)
        return replace(m, auth=rs[r].sign(signed_body("zyzzyva", m)))

    for r, h in ((0, b"\1" * 32), (1, b"\1" * 32), (2, b"\2" * 32), (3, b"\2" * 32)):
        client.step(Deliver(response(r, h), r))
    out = client.step(TimerFire("retx"))
    proofs = [o.payload for o in out if isinstance(o, Broadcast) and isinstance(o.payload, Misbehavior)]
    assert len(proofs) == 1
    signals = rs[1].step(Deliver(proofs[0], "c0"))
    assert signals == [ViewChangeSignal(1)]


def test_divergence_replay_is_detected():
    report = run_scenario(bundled("zyzzyva_divergence"))
    assert isinstance(verify_safety(report), Violation)
    assert not report.ok


def test_withheld_certificates_stall_but_stay_safe():
    report = run_scenario(replace(bundled("zyzzyva_withheld_certificates"), trace=False))
    assert report.ok
    assert report.metrics["completed"] == 0
