import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from bftlab import codec
from bftlab.ledger import (
    ZERO_DIGEST, Block, BrokenLink, Chain, ChainBuilder, FirstInvalid, LedgerError, Ok, Transaction, WrongNumber,
    append_block, batch_digest, chain_from_json, chain_to_json, digest, genesis, loads_chain, dumps_chain,
    verify_chain,
)


def tx(i: int) -> Transaction:
    return Transaction(f"c{i % 3}", i, f"SET k{i} v{i}".encode())


def build(length: int) -> Chain:
    b = ChainBuilder()
    for i in range(1, length):
        b.append(b.make_block((tx(i), tx(i + 100)), proposer=i % 4, view=0, certificate=bytes([i])))
    return b.freeze()


def test_genesis_is_block_zero():
    g = genesis()
    assert g.number == 0
    assert g.parent_digest == bytes(32)
    assert g.transactions == ()
    assert genesis() is g or codec.encode(genesis()) == codec.encode(g)


def test_digest_is_sha3_of_encoding():
    b = build(3)[2]
    assert digest(b) == hashlib.sha3_256(codec.encode(b)).digest()


def test_append_and_errors():
    ch = Chain()
    b1 = Block(1, digest(genesis()), (tx(1),))
    ch2 = append_block(ch, b1)
    assert len(ch2) == 2 and ch2.blocks[0] == genesis()
    with pytest.raises(WrongNumber):
        append_block(build(3), Block(5, digest(build(3).tip), ()))
    long = build(3)
    with pytest.raises(BrokenLink):
        append_block(long, Block(3, digest(long[0]), ()))


def test_append_leaves_prior_blocks_untouched():
    ch = build(4)
    before = [codec.encode(b) for b in ch.blocks]
    ch2 = append_block(ch, Block(4, digest(ch.tip), (tx(9),)))
    assert [codec.encode(b) for b in ch2.blocks[:4]] == before
    assert [codec.encode(b) for b in ch.blocks] == before


def test_invalid_transactions_and_blocks():
    with pytest.raises(LedgerError):
        Transaction("c0", -1, b"x")
    with pytest.raises(LedgerError):
        Transaction("c0", 0, b"")
    with pytest.raises(LedgerError):
        Block(1, b"short")


def test_verify_chain_ok_and_first_invalid():
    assert verify_chain(Chain()) == Ok()
    assert verify_chain(build(5)) == Ok()
    ch = build(5)
    b3 = ch[3]
    t0 = b3.transactions[0]
    flipped = Transaction(t0.client_id, t0.nonce, bytes([t0.payload[0] ^ 1]) + t0.payload[1:])
    blocks = list(ch.blocks)
    blocks[3] = Block(3, b3.parent_digest, (flipped,) + b3.transactions[1:], b3.proposer, b3.view, b3.certificate)
    assert verify_chain(Chain(tuple(blocks))) == FirstInvalid(4)


def test_verify_rejects_foreign_genesis():
    ch = build(3)
    bad = Chain((Block(0, ZERO_DIGEST, (tx(0),)),) + ch.blocks[1:])
    assert verify_chain(bad) == FirstInvalid(0)


def test_builder_truncate_keeps_genesis():
    b = ChainBuilder()
    for i in range(1, 4):
        b.append(b.make_block((tx(i),)))
    dropped = b.truncate(2)
    assert len(dropped) == 2 and len(b) == 2
    with pytest.raises(LedgerError):
        b.truncate(0)


def test_json_roundtrip():
    ch = build(4)
    assert chain_from_json(chain_to_json(ch)) == ch
    assert loads_chain(dumps_chain(ch)) == ch


def test_batch_digest_ignores_metadata():
    a = Block(1, ZERO_DIGEST, (tx(1),), proposer=0)
    b = Block(1, ZERO_DIGEST, (tx(1),), proposer=3, view=7)
    assert batch_digest(a.transactions) == batch_digest(b.transactions)
    assert digest(a) != digest(b)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8).flatmap(lambda L: st.tuples(st.just(L), st.integers(0, L - 2))), st.data())
def test_payload_mutation_found_one_past_the_block(lk, data):
    length, k = lk
    ch = build(length)
    blocks = list(ch.blocks)
    b = blocks[k]
    if b.transactions:
        t0 = b.transactions[0]
        pos = data.draw(st.integers(0, len(t0.payload) - 1))
        p = bytearray(t0.payload)
        p[pos] ^= data.draw(st.integers(1, 255))
        mutated = Block(b.number, b.parent_digest, (Transaction(t0.client_id, t0.nonce, bytes(p)),) + b.transactions[1:],
                        b.proposer, b.view, b.certificate)
        expect = k + 1
    else:
        # genesis carries no payload: mutate its metadata instead
        mutated = Block(0, b.parent_digest, b.transactions, b.proposer, b.view + 1, b.certificate)
        expect = 0
    blocks[k] = mutated
    assert verify_chain(Chain(tuple(blocks))) == FirstInvalid(expect)
