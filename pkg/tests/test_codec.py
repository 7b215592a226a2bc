from dataclasses import dataclass
from typing import Optional

import pytest
from hypothesis import given, strategies as st

from bftlab import codec
from bftlab.codec import CodecError, decode, decode_frame, encode, encode_frame, frame, pack, sha3
from bftlab.crypto import Authenticator
from bftlab.protocols.common import Request
from bftlab.protocols.pbft import PrePrepare
from conftest import make_tx


@dataclass(frozen=True)
class Sample:
    a: int
    b: bytes
    c: str
    d: tuple[int, ...]
    e: Optional[int] = None


def test_ints_are_eight_byte_big_endian():
    assert encode(Sample(1, b"", "", ())).startswith((1).to_bytes(8, "big"))


def test_sha3_matches_hashlib_reference():
    import hashlib
    assert sha3(b"ab", b"c") == hashlib.sha3_256(b"abc").digest()


@given(st.integers(-2**63, 2**63 - 1), st.binary(max_size=40), st.text(max_size=20),
       st.lists(st.integers(0, 1000), max_size=5), st.one_of(st.none(), st.integers(0, 99)))
def test_roundtrip(a, b, c, d, e):
    s = Sample(a, b, c, tuple(d), e)
    assert decode(Sample, encode(s)) == s


def test_trailing_bytes_rejected():
    with pytest.raises(CodecError):
        decode(Sample, encode(Sample(1, b"x", "y", ())) + b"\0")


def test_truncated_rejected():
    with pytest.raises(CodecError):
        decode(Sample, encode(Sample(1, b"x", "y", ()))[:-1])


def test_frame_roundtrip_keeps_type(keyring):
    tx = make_tx(keyring)
    m = PrePrepare(0, 1, b"\1" * 32, (tx,), Authenticator("sig", b"t", "0"))
    data = encode_frame(m)
    assert data[0] == 10
    assert decode_frame(data) == m
    assert decode_frame(encode_frame(Request(tx))) == Request(tx)


def test_unknown_and_empty_frames():
    with pytest.raises(CodecError):
        decode_frame(b"")
    with pytest.raises(CodecError):
        decode_frame(bytes([255]))


def test_tag_collision_refused():
    with pytest.raises(ValueError):
        @frame(10)
        @dataclass(frozen=True)
        class Clash:
            x: int


def test_tags_are_single_nonzero_bytes():
    with pytest.raises(ValueError):
        frame(0)
    with pytest.raises(ValueError):
        frame(256)


def test_pack_is_injective_on_boundaries():
    # length prefixes keep ("ab","c") and ("a","bc") apart
    assert pack("ab", "c") != pack("a", "bc")
    assert pack(1, b"x") != pack(b"\0" * 7 + b"\1", b"x")
    with pytest.raises(TypeError):
        pack(1.5)


def test_all_frame_tags_unique():
    import importlib
    for mod in ("pbft", "sbft", "poe", "zyzzyva", "hotstuff", "multiconsensus", "permissionless"):
        importlib.import_module(f"bftlab.protocols.{mod}")
    expected = {1, 2, 3, 4, 5, 6, 10, 11, 12, *range(20, 28), 30, 31, 32, *range(40, 45), *range(50, 55),
                *range(60, 66), *range(70, 74)}
    assert set(codec.FRAMES) == expected
    tags = [cls.TAG for cls in codec.FRAMES.values()]
    assert len(tags) == len(set(tags))


def test_negative_sequence_length_rejected():
    from bftlab.ledger import Block

    raw = bytearray(encode(Block(1, bytes(32), ())))
    # the transaction count follows number (8 bytes) and the parent digest (8 + 32 bytes)
    raw[48] = 0xB9
    with pytest.raises(CodecError):
        decode(Block, bytes(raw))
