import pytest

from bftlab.crypto import Keyring
from bftlab.harness.config import ScenarioConfig
from bftlab.harness.runner import run_scenario
from bftlab.ledger import Transaction
from bftlab.protocols.common import ProtocolContext
from bftlab.statemachine import make_payload

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def make_tx(keyring: Keyring, client: str = "c0", nonce: int = 0) -> Transaction:
    keyring.add(client)
    payload = make_payload(client, nonce)
    body = Transaction(client, nonce, payload, ()).signing_bytes()
    return Transaction(client, nonce, payload, (keyring.sign(client, body),))


def make_ctx(n=4, f=1, c=0, clients=("c0",), domain="bft", **kw) -> ProtocolContext:
    kr = Keyring(b"test")
    for r in range(n):
        kr.add(r)
    for cl in clients:
        kr.add(cl)
    return ProtocolContext(keyring=kr, members=tuple(range(n)), f=f, c=c, clients=frozenset(clients),
                           domain=domain, **kw)


def run(protocol, **kw):
    kw.setdefault("trace", False)
    return run_scenario(ScenarioConfig(protocol, **kw))


def run_keep(protocol, **kw):
    kw.setdefault("trace", False)
    keep = []
    report = run_scenario(ScenarioConfig(protocol, **kw), keep=keep)
    return report, keep[0]


@pytest.fixture
def keyring():
    kr = Keyring(b"fixture")
    for r in range(4):
        kr.add(r)
    return kr


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
