"""Append-only, hash-linked block store kept independently by every replica."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import codec
from .crypto import Authenticator

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)


class LedgerError(ValueError):
    pass


class WrongNumber(LedgerError):
    pass


class BrokenLink(LedgerError):
    pass


@dataclass(frozen=True)
class Transaction:
    client_id: str
    nonce: int
    payload: bytes
    client_auth: tuple[Authenticator, ...] = ()

    def __post_init__(self):
        if self.nonce < 0:
            raise LedgerError("nonce must be non-negative")
        if not self.payload:
            raise LedgerError("transaction payload must be non-empty")

    @property
    def key(self) -> tuple[str, int]:
        return (self.client_id, self.nonce)

    def signing_bytes(self) -> bytes:
        return codec.pack("tx", self.client_id, self.nonce, self.payload)


@dataclass(frozen=True)
class Block:
    number: int
    parent_digest: bytes
    transactions: tuple[Transaction, ...] = ()
    proposer: Optional[int | str] = None
    view: int = 0
    certificate: bytes = b""

    def __post_init__(self):
        if len(self.parent_digest) != DIGEST_SIZE:
            raise LedgerError("parent digest must be 32 bytes")


def digest(block: Block) -> bytes:
    """SHA3-256 over the canonical encoding of every block field, metadata included."""
    return codec.sha3(codec.encode(block))


def batch_digest(transactions: Iterable[Transaction]) -> bytes:
    txs = tuple(transactions)
    return codec.sha3(b"batch", codec.encode(_Batch(txs)))


@dataclass(frozen=True)
class _Batch:
    transactions: tuple[Transaction, ...]


_GENESIS = Block(0, ZERO_DIGEST, ())


def genesis() -> Block:
    return _GENESIS


@dataclass(frozen=True)
class Chain:
    blocks: tuple[Block, ...] = field(default_factory=lambda: (_GENESIS,))

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]


def append_block(chain: Chain, block: Block) -> Chain:
    if block.number != len(chain.blocks):
        raise WrongNumber(f"expected block number {len(chain.blocks)}, got {block.number}")
    if block.parent_digest != digest(chain.blocks[-1]):
        raise BrokenLink(f"block {block.number} does not link to the current tip")
    return Chain(chain.blocks + (block,))


@dataclass(frozen=True)
class Ok:
    pass


@dataclass(frozen=True)
class FirstInvalid:
    index: int


def verify_chain(chain: Chain) -> Ok | FirstInvalid:
    """``Ok`` when every link holds, otherwise the smallest index whose number or parent link is wrong."""
    blocks = chain.blocks
    if not blocks or blocks[0] != _GENESIS:
        return FirstInvalid(0)
    prev = digest(blocks[0])
    for i in range(1, len(blocks)):
        b = blocks[i]
        if b.number != i or b.parent_digest != prev:
            return FirstInvalid(i)
        prev = digest(b)
    return Ok()


class ChainBuilder:
    """Mutable companion used by replicas: appends in O(1) and caches the tip digest."""

    def __init__(self):
        self.blocks: list[Block] = [_GENESIS]
        self.digests: list[bytes] = [digest(_GENESIS)]

    def __len__(self):
        return len(self.blocks)

    @property
    def tip_digest(self) -> bytes:
        return self.digests[-1]

    def make_block(self, transactions, proposer=None, view=0, certificate=b"") -> Block:
        return Block(len(self.blocks), self.digests[-1], tuple(transactions), proposer, view, certificate)

    def append(self, block: Block) -> Block:
        if block.number != len(self.blocks):
            raise WrongNumber(f"expected block number {len(self.blocks)}, got {block.number}")
        if block.parent_digest != self.digests[-1]:
            raise BrokenLink(f"block {block.number} does not link to the current tip")
        self.blocks.append(block)
        self.digests.append(digest(block))
        return block

    def truncate(self, length: int) -> list[Block]:
        if length < 1:
            raise LedgerError("cannot truncate away the genesis block")
        dropped = self.blocks[length:]
        del self.blocks[length:]
        del self.digests[length:]
        return dropped

    def freeze(self) -> Chain:
        return Chain(tuple(self.blocks))


# --- JSON export ------------------------------------------------------------

def _auth_json(a: Authenticator) -> dict:
    return {"kind": a.kind, "tag": a.tag.hex(), "signer": a.signer}


def _tx_json(tx: Transaction) -> dict:
    return {
        "client_id": tx.client_id,
        "nonce": tx.nonce,
        "payload": tx.payload.hex(),
        "client_auth": [_auth_json(a) for a in tx.client_auth],
    }


def block_to_json(block: Block) -> dict:
    return {
        "number": block.number,
        "parent_digest": block.parent_digest.hex(),
        "digest": digest(block).hex(),
        "transactions": [_tx_json(t) for t in block.transactions],
        "proposer": block.proposer,
        "view": block.view,
        "certificate": block.certificate.hex(),
    }


def block_from_json(d: dict) -> Block:
    txs = tuple(
        Transaction(
            t["client_id"],
            t["nonce"],
            bytes.fromhex(t["payload"]),
            tuple(Authenticator(a["kind"], bytes.fromhex(a["tag"]), a["signer"]) for a in t["client_auth"]),
        )
        for t in d["transactions"]
    )
    return Block(
        d["number"],
        bytes.fromhex(d["parent_digest"]),
        txs,
        d.get("proposer"),
        d.get("view", 0),
        bytes.fromhex(d.get("certificate", "")),
    )


def chain_to_json(chain: Chain) -> list[dict]:
    return [block_to_json(b) for b in chain.blocks]


def chain_from_json(items: list[dict]) -> Chain:
    """Rebuild a chain. Stored digests are informational; links are re-derived by ``verify_chain``."""
    return Chain(tuple(block_from_json(d) for d in items))


def dumps_chain(chain: Chain) -> str:
    return json.dumps(chain_to_json(chain), sort_keys=True)


def loads_chain(text: str) -> Chain:
    return chain_from_json(json.loads(text))
