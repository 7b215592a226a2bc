from bftlab.protocols.common import Request
from bftlab.protocols.pbft import PBFT, CommitVote, PrePrepare, Prepare
from bftlab.runtime import Broadcast, Deliver, Send, SetTimer, TimerFire
from bftlab.ledger import Transaction, batch_digest
from bftlab.simnet import Mute
from conftest import make_ctx, make_tx, run, run_keep


def cluster(n=4, f=1):
    ctx = make_ctx(n, f, domain="pbft")
    return ctx, {r: PBFT(r, ctx) for r in range(n)}


def of(outs, kind):
    return [o for o in outs if isinstance(o, kind)]


def preprepare(primary: PBFT, tx, seq=1, view=0):
    batch = (tx,)
    d = batch_digest(batch)
    return PrePrepare(view, seq, d, batch, primary.sign(primary.prepare_bytes(view, seq, d)))


def test_primary_broadcasts_preprepare():
    ctx, rs = cluster()
    out = rs[0].step(Deliver(Request(make_tx(ctx.keyring)), "c0"))
    [b] = of(out, Broadcast)
    assert isinstance(b.payload, PrePrepare) and set(b.dsts) == {1, 2, 3}


def test_bad_client_signature_is_dropped():
    ctx, rs = cluster()
    tx = make_tx(ctx.keyring)
    forged = Transaction(tx.client_id, tx.nonce, b"SET x 1", tx.client_auth)
    assert rs[0].step(Deliver(Request(forged), "c0")) == []
    assert rs[0].metrics.counters["bad_client_auth"] == 1


def test_backup_relays_and_arms_timer():
    ctx, rs = cluster()
    out = rs[2].step(Deliver(Request(make_tx(ctx.keyring)), "c0"))
    assert of(out, Send)[0].dst == 0
    assert of(out, SetTimer)[0].timer_id == "req"


def test_valid_preprepare_yields_one_prepare_broadcast():
    ctx, rs = cluster()
    out = rs[1].step(Deliver(preprepare(rs[0], make_tx(ctx.keyring)), 0))
    [b] = of(out, Broadcast)
    assert isinstance(b.payload, Prepare)


def test_preprepare_from_backup_dropped():
    ctx, rs = cluster()
    p = preprepare(rs[0], make_tx(ctx.keyring))
    assert rs[1].step(Deliver(p, 2)) == []
    assert rs[1].metrics.counters["dropped_not_primary"] == 1


def test_conflicting_preprepare_for_same_slot():
    ctx, rs = cluster()
    rs[1].step(Deliver(preprepare(rs[0], make_tx(ctx.keyring, nonce=0)), 0))
    assert rs[1].step(Deliver(preprepare(rs[0], make_tx(ctx.keyring, nonce=1)), 0)) == []
    assert rs[1].metrics.counters["equivocation_detected"] == 1


def test_prepared_then_committed():
    ctx, rs = cluster()
    p = preprepare(rs[0], make_tx(ctx.keyring))
    for r in (1, 2, 3):
        rs[r].step(Deliver(p, 0))
    key = (0, 1, p.digest)
    prep = {r: Prepare(0, 1, p.digest, r, rs[r].sign(rs[r].prepare_bytes(*key))) for r in (1, 2)}
    # its own Prepare counts towards the 2f, so one more backup suffices
    assert key not in rs[3].prepared
    out = rs[3].step(Deliver(prep[1], 1))
    assert key in rs[3].prepared
    rs[3].step(Deliver(prep[2], 2))
    assert any(isinstance(b.payload, CommitVote) for b in of(out, Broadcast))
    commits = [CommitVote(0, 1, p.digest, r, rs[r].sign(rs[r].commit_bytes(*key))) for r in (0, 1)]
    for c in commits:
        rs[3].step(Deliver(c, c.replica))
    assert rs[3].last_executed == 1
    assert len(rs[3].chain) == 2


def test_execution_waits_for_the_gap():
    ctx, rs = cluster()
    r3 = rs[3]
    digests = {}
    for seq, nonce in ((2, 1), (1, 0)):
        p = preprepare(rs[0], make_tx(ctx.keyring, nonce=nonce), seq=seq)
        digests[seq] = p.digest
        r3.step(Deliver(p, 0))
        for r in (0, 1, 2):
            key = (0, seq, p.digest)
            if r:
                r3.step(Deliver(Prepare(0, seq, p.digest, r, rs[r].sign(rs[r].prepare_bytes(*key))), r))
            r3.step(Deliver(CommitVote(0, seq, p.digest, r, rs[r].sign(rs[r].commit_bytes(*key))), r))
        if seq == 2:
            assert r3.last_executed == 0 and 2 in r3.committed
    assert r3.last_executed == 2
    assert [b.transactions[0].nonce for b in r3.chain.blocks[1:]] == [0, 1]


def test_lone_view_change_is_ignored():
    ctx, rs = cluster()
    # replica 3 times out alone; a single ViewChange is below the f+1 join rule
    out = rs[3].step(TimerFire("req"))
    [vc] = [b.payload for b in of(out, Broadcast)]
    assert rs[1].step(Deliver(vc, 3)) == []
    assert rs[1].vc_view is None and rs[1].view == 0


def test_mute_primary_trace_shows_view_change():
    r = run("pbft", clients=1, requests=3, adversary={0: Mute(0)}, trace=True)
    vcs = {e["src"] for e in r.trace if e["kind"] == "send" and e["type"] == "ViewChange"}
    nvs = {e["src"] for e in r.trace if e["kind"] == "send" and e["type"] == "NewView"}
    assert vcs == {1, 2, 3}
    assert nvs == {1}
    assert r.metrics["completed"] == 3 and r.ok


def test_prepared_request_keeps_its_sequence_number():
    report, sim = run_keep("pbft", clients=4, requests=5, adversary={0: Mute(45)}, seed=3)
    honest = [sim.dep.replicas[r] for r in (1, 2, 3)]
    prepared = {(seq, d) for a in honest for (v, seq, d) in a.prepared if v == 0}
    assert prepared
    for a in honest:
        for seq, d in prepared:
            assert batch_digest(a.chain.blocks[seq].transactions) == d
    assert report.ok


def test_failure_free_run_commits_everywhere():
    r = run("pbft", clients=4, requests=25)
    assert r.metrics["committed"] == 100
    assert r.metrics["replicas_with_all_requests"] == 4
    assert r.metrics["view_changes"] == 0


def test_mute_primary_run_recovers():
    r = run("pbft", clients=4, requests=25, adversary={0: Mute(0)})
    assert r.metrics["view_changes"] >= 1
    assert r.metrics["completed"] == 100 and r.ok
