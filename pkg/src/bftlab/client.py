"""Client automaton: submit one request at a time, collect matching replies, retransmit on timeout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .crypto import MAC, SIGNATURE, Keyring
from .ledger import Transaction
from .runtime import (
    Automaton, Broadcast, CancelTimer, ClientRequest, Deliver, Metrics, Send, SetTimer, TimerFire,
)
from .protocols.common import ClientReply, Request, reply_bytes
from .statemachine import make_payload


class ClientError(RuntimeError):
    pass


class AlreadyPending(ClientError):
    pass


class BadAuthenticator(ClientError):
    pass


@dataclass(frozen=True)
class Submitted:
    """Emitted when a request is first sent; the harness timestamps it."""

    client: str
    nonce: int


@dataclass(frozen=True)
class Completed:
    client: str
    nonce: int
    result: bytes
    path: str = "normal"


@dataclass
class ClientState:
    pending: Optional[Transaction] = None
    responses: dict = field(default_factory=dict)
    timer_id: Any = "retx"
    completion_rule: int = 2
    dual_sign: bool = False
    timeout: int = 100
    retries: int = 0
    done: bool = False


PRIMARY = "primary"
ALL = "all"


class Client(Automaton):
    """Closed-loop client issuing ``requests`` transactions one after another.

    ``need`` is the number of distinct replicas that must return the same
    result; ``primary_for(view)`` tells the client where to send first.
    """

    def __init__(self, name: str, keyring: Keyring, replicas, need: int, *,
                 requests: int = 1, timeout: int = 100, target: str = PRIMARY,
                 primary_for: Optional[Callable[[int], Any]] = None, dual_sign: bool = False,
                 domain: str = "bft", start_nonce: int = 0):
        self.node_id = name
        self.keyring = keyring
        self.replicas = tuple(replicas)
        self.domain = domain
        self.target = target
        self.primary_for = primary_for or (lambda v: self.replicas[v % len(self.replicas)])
        self.requests = requests
        self.next_nonce = start_nonce
        self.last_nonce = start_nonce + requests - 1
        self.view = 0
        self.state = ClientState(completion_rule=need, dual_sign=dual_sign, timeout=timeout)
        self.base_timeout = timeout
        self.results: dict[int, bytes] = {}
        self.metrics = Metrics()
        self._out: list = []
        keyring.add(name)

    # -- plumbing --
    def step(self, inp) -> list:
        self._out = []
        if isinstance(inp, Deliver):
            self.on_message(inp.payload, inp.src)
        elif isinstance(inp, TimerFire):
            if inp.timer_id == self.state.timer_id:
                self.on_timeout()
            else:
                self.on_other_timer(inp.timer_id)
        elif isinstance(inp, ClientRequest):
            self.submit(inp.tx)
        out, self._out = self._out, []
        return out

    def emit(self, o) -> None:
        self._out.append(o)

    def start(self) -> list:
        """Outputs for the first request; called once by the harness at t=0."""
        self._out = []
        self.submit_next()
        out, self._out = self._out, []
        return out

    def make_tx(self, nonce: int) -> Transaction:
        payload = make_payload(self.node_id, nonce)
        body = Transaction(self.node_id, nonce, payload, ()).signing_bytes()
        auths = [self.keyring.sign(self.node_id, body, SIGNATURE)]
        if self.state.dual_sign:
            auths.append(self.keyring.sign(self.node_id, body, MAC))
        return Transaction(self.node_id, nonce, payload, tuple(auths))

    def submit_next(self) -> None:
        if self.next_nonce > self.last_nonce:
            self.state.done = True
            return
        tx = self.make_tx(self.next_nonce)
        self.next_nonce += 1
        self.submit(tx)

    # -- operations --
    def submit(self, tx: Transaction) -> None:
        st = self.state
        if st.pending is not None:
            raise AlreadyPending(f"{self.node_id} already waits on nonce {st.pending.nonce}")
        st.pending = tx
        st.responses = {}
        st.retries = 0
        st.timeout = self.base_timeout
        self.emit(Submitted(self.node_id, tx.nonce))
        self.send_request(tx, first=True)
        self.emit(SetTimer(st.timer_id, st.timeout))

    def send_request(self, tx: Transaction, first: bool) -> None:
        if first and self.target == PRIMARY:
            self.emit(Send(self.primary_for(self.view), Request(tx)))
        else:
            self.emit(Broadcast(Request(tx), self.replicas))

    def reply_valid(self, m: ClientReply, src) -> bool:
        return (m.replica == src and src in self.replicas
                and self.keyring.verify_from(src, reply_bytes(self.domain, m.client, m.nonce, m.result), m.auth))

    def on_message(self, m, src) -> None:
        if isinstance(m, ClientReply):
            self.on_reply(m, src)
        else:
            self.metrics.bump("dropped_unknown")

    def on_reply(self, m: ClientReply, src) -> None:
        st = self.state
        if st.pending is None or m.nonce != st.pending.nonce or m.client != self.node_id:
            return
        if not self.reply_valid(m, src):
            self.metrics.bump("bad_reply_auth")
            return
        self.view = max(self.view, m.view)
        if self.on_response(src, m.result):
            self.complete(m.result)

    def on_response(self, replica, result: bytes) -> bool:
        """Record a reply; True once ``completion_rule`` distinct replicas agree on ``result``."""
        voters = self.state.responses.setdefault(result, set())
        voters.add(replica)
        return len(voters) >= self.state.completion_rule

    def complete(self, result: bytes, path: str = "normal") -> None:
        st = self.state
        tx = st.pending
        self.results[tx.nonce] = result
        self.emit(Completed(self.node_id, tx.nonce, result, path))
        self.emit(CancelTimer(st.timer_id))
        st.pending = None
        st.responses = {}
        self.submit_next()

    def on_timeout(self) -> None:
        st = self.state
        if st.pending is None:
            return
        st.retries += 1
        self.metrics.bump("retransmissions")
        self.send_request(st.pending, first=False)
        st.timeout *= 2
        self.emit(SetTimer(st.timer_id, st.timeout))

    def on_other_timer(self, timer_id) -> None:
        pass

    def inspect(self) -> dict:
        return {"node": self.node_id, "completed": len(self.results), "done": self.state.done,
                "metrics": dict(self.metrics.counters)}
