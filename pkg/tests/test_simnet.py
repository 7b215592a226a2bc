import random

import pytest
from hypothesis import given, settings, strategies as st

from bftlab.harness.config import ScenarioConfig
from bftlab.harness.runner import run_scenario
from bftlab.simnet import (
    IDLE, AdversarySpec, Constant, Crash, Custom, Delay, Delivery, Envelope, Equivocate, Mute, Network, NetworkModel,
    Partition, SimError, TimerFire, Uniform, UnknownNode, adversary_transform, schedule_send, script, step,
)


def net(model=None, nodes=(0, 1, 2, 3), seed=0, trace=None):
    return Network(model or NetworkModel(), nodes, seed, trace)


def test_constant_delay_delivery():
    n = net()
    schedule_send(n, Envelope(0, 1, "hi", 0))
    ev = step(n)
    assert ev == Delivery(1, 0, "hi", 10)
    assert step(n) is IDLE


def test_unknown_node():
    with pytest.raises(UnknownNode):
        net().schedule_send(Envelope(0, 9, "x", 0))


def test_fifo_tie_break_on_equal_times():
    n = net()
    for i in range(5):
        n.schedule_send(Envelope(0, 1, i, 0))
    assert [step(n).payload for _ in range(5)] == [0, 1, 2, 3, 4]


def test_timers_cancel_and_rearm():
    n = net()
    n.set_timer(0, "t", 5)
    n.cancel_timer(0, "t")
    n.set_timer(1, "u", 7)
    n.set_timer(1, "u", 9)  # rearming supersedes the first fire
    assert step(n) == TimerFire(1, "u", 9)
    assert step(n) is IDLE


def test_loss_and_duplication_extremes():
    lossy = net(NetworkModel(loss_prob=1.0))
    assert lossy.schedule_send(Envelope(0, 1, "x", 0)) == []
    dup = net(NetworkModel(dup_prob=1.0))
    assert len(dup.schedule_send(Envelope(0, 1, "x", 0))) == 2
    with pytest.raises(SimError):
        NetworkModel(loss_prob=1.5)


def test_partition_window():
    p = Partition((frozenset({0, 1}), frozenset({2, 3})), start=10, end=20)
    n = net(NetworkModel(partitions=(p,)))
    assert n.schedule_send(Envelope(0, 2, "x", 5))
    assert n.schedule_send(Envelope(0, 2, "x", 15)) == []
    assert n.schedule_send(Envelope(0, 1, "x", 15))
    assert n.schedule_send(Envelope(0, 2, "x", 20))


def test_uniform_bounds_and_mean():
    u = Uniform(5, 15)
    rng = random.Random(1)
    draws = [u.draw(rng) for _ in range(2000)]
    assert min(draws) >= 5 and max(draws) <= 15
    assert u.mean == 10
    with pytest.raises(ValueError):
        Uniform(9, 3)


def test_inter_region_delay_and_labels():
    m = NetworkModel(regions={0: 0, 1: 1}, inter_region_delay=Constant(100))
    n = net(m, nodes=(0, 1, "c0"))
    n.schedule_send(Envelope(0, 1, "far", 0))
    n.schedule_send(Envelope(0, "c0", "near", 0))
    assert step(n).payload == "near"
    assert step(n).time == 100
    assert not m.cross_region(0, "c0")


def test_link_extra_applies_per_direction():
    n = net(NetworkModel(link_extra={(3, 1): 50}))
    n.schedule_send(Envelope(3, 1, "slow", 0))
    n.schedule_send(Envelope(1, 3, "fast", 0))
    assert step(n).payload == "fast"
    assert step(n).time == 60


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 50)), max_size=30))
def test_same_seed_same_schedule(seed, sends):
    def replay():
        n = net(NetworkModel(Uniform(1, 40), loss_prob=0.1, dup_prob=0.1), seed=seed)
        for s, d, t in sends:
            n.schedule_send(Envelope(s, d, (s, d, t), t))
        out = []
        while (ev := step(n)) is not IDLE:
            out.append(ev)
        return out

    first = replay()
    assert first == replay()
    assert [e.time for e in first] == sorted(e.time for e in first)


# --- adversary ---

class Echo:
    def equivocate(self, payload):
        return ("alt", payload)


def test_crash_mute_and_delay():
    env = Envelope(0, 1, "m", 5)
    assert adversary_transform(AdversarySpec({0: Crash(3)}), env, 5) == []
    assert adversary_transform(AdversarySpec({0: Mute(10)}), env, 5) == [env]
    assert adversary_transform(AdversarySpec({0: Mute(0)}), env, 5) == []
    delayed = adversary_transform(AdversarySpec({0: Delay(40)}), env, 5)
    assert delayed[0].extra_delay == 40
    assert adversary_transform(AdversarySpec({1: Mute()}), env, 5) == [env]
    assert AdversarySpec({0: Crash(3)}).crashed(0, 3) and not AdversarySpec({0: Crash(3)}).crashed(0, 2)


def test_equivocation_only_towards_targets():
    spec = AdversarySpec({0: Equivocate(targets=(2, 3))})
    a = adversary_transform(spec, Envelope(0, 1, "d", 0), 0, Echo())
    b = adversary_transform(spec, Envelope(0, 2, "d", 0), 0, Echo())
    assert a[0].payload == "d" and b[0].payload == ("alt", "d")


def test_custom_script_registry_and_state():
    @script("test_drop_odd")
    def drop_odd(env, ctx):
        ctx.state["seen"] = ctx.state.get("seen", 0) + 1
        return [] if env.payload % 2 else [env]

    spec = AdversarySpec({0: Custom("test_drop_odd")})
    state = {}
    kept = [e for i in range(6) for e in adversary_transform(spec, Envelope(0, 1, i, 0), 0, None, state)]
    assert [e.payload for e in kept] == [0, 2, 4]
    assert state[0]["seen"] == 6
    with pytest.raises(SimError):
        adversary_transform(AdversarySpec({0: Custom("no_such_script")}), Envelope(0, 1, 0, 0), 0)


def test_equivocating_pbft_primary_splits_payloads():
    r = run_scenario(ScenarioConfig("pbft", clients=1, requests=2, adversary={0: Equivocate(targets=(1,))}, seed=0))
    pre = {}
    for e in r.trace:
        if e["kind"] == "send" and e["type"] == "PrePrepare" and e["src"] == 0:
            pre.setdefault(e["digest"], set()).add(e["dst"])
    assert len(pre) >= 2
    assert any(d == {1} for d in pre.values())
    assert r.ok
