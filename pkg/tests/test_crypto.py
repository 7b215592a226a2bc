import hashlib
import hmac
import itertools
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from bftlab.crypto import (
    MAC, SIGNATURE, Authenticator, CryptoError, Keyring, MixedMessages, NotInGroup, ThresholdGroup,
    ThresholdParams, TooFewShares, threshold_combine, threshold_share, threshold_verify, verify_quorum,
)


def group_of(t, n, seed=b"g"):
    kr = Keyring(seed)
    return kr, ThresholdGroup(kr, range(n), t)


def test_keys_are_deterministic_in_seed():
    a, b, c = Keyring(b"s"), Keyring(b"s"), Keyring(b"other")
    assert a.add(1) == b.add(1)
    assert a.add(1).secret != c.add(1).secret


def test_sign_verify_roundtrip(keyring):
    auth = keyring.sign(0, b"hello")
    assert keyring.verify(keyring.handle(0), b"hello", auth)
    assert not keyring.verify(keyring.handle(0), b"hellp", auth)
    assert not keyring.verify(keyring.handle(1), b"hello", auth)


def test_mac_is_shorter_and_distinct(keyring):
    sig = keyring.sign(0, b"m", SIGNATURE)
    mac = keyring.sign(0, b"m", MAC)
    assert len(mac.tag) == 16 and len(sig.tag) == 32
    assert keyring.verify_from(0, b"m", mac)
    # swapping the kind label does not turn a MAC into a signature
    assert not keyring.verify_from(0, b"m", replace(mac, kind=SIGNATURE))


def test_unknown_kind(keyring):
    with pytest.raises(CryptoError):
        keyring.sign(0, b"m", "rsa")
    assert not keyring.verify_from(0, b"m", Authenticator("rsa", b"x", "0"))


def test_missing_key(keyring):
    with pytest.raises(CryptoError):
        keyring.key("nobody")
    assert not keyring.verify_from("nobody", b"m", keyring.sign(0, b"m"))


def test_tag_oracle_is_keyed_sha3(keyring):
    # independent recomputation: SHA3-256(secret || label || msg)
    k = keyring.key(2)
    expected = hashlib.sha3_256(k.secret + b"sig" + b"payload").digest()
    assert hmac.compare_digest(keyring.sign(2, b"payload").tag, expected)


def test_impersonation_exhaustive_five_keys():
    kr = Keyring(b"imp")
    names = [kr.add(i).replica_id for i in range(5)]
    msg = b"order 7"
    for a, b in itertools.permutations(names, 2):
        forged = replace(kr.sign(a, msg), signer=b)
        assert not kr.verify_from(b, msg, forged)
        assert not kr.verify_from(b, msg, kr.sign(a, msg))
        assert not kr.verify(kr.handle(b), msg, kr.sign(a, msg))


def test_combine_at_threshold_and_verify():
    kr, g = group_of(3, 4)
    shares = [g.share(kr.key(i), b"m") for i in range(3)]
    sig = g.combine(shares)
    assert g.verify(sig, b"m")
    assert not g.verify(sig, b"m2")


def test_too_few_and_duplicate_shares():
    kr, g = group_of(3, 4)
    s0 = g.share(kr.key(0), b"m")
    s1 = g.share(kr.key(1), b"m")
    with pytest.raises(TooFewShares):
        g.combine([s0, s1])
    with pytest.raises(TooFewShares):
        g.combine([s0, s0, s1])


def test_corrupted_share_counts_for_nothing():
    kr, g = group_of(3, 4)
    shares = [g.share(kr.key(i), b"m") for i in range(3)]
    bad = replace(shares[2], share=bytes([shares[2].share[0] ^ 1]) + shares[2].share[1:])
    with pytest.raises(TooFewShares):
        g.combine(shares[:2] + [bad])


def test_mixed_messages_refused():
    kr, g = group_of(2, 3)
    with pytest.raises(MixedMessages):
        g.combine([g.share(kr.key(0), b"a"), g.share(kr.key(1), b"b")])


def test_outsider_cannot_share():
    kr, g = group_of(2, 3)
    kr.add("mallory")
    with pytest.raises(NotInGroup):
        g.share(kr.key("mallory"), b"m")


def test_verify_rejects_padded_signature():
    kr, g = group_of(2, 3)
    sig = g.combine([g.share(kr.key(i), b"m") for i in range(2)])
    assert not g.verify(replace(sig, signers=sig.signers + sig.signers[:1], shares=sig.shares + sig.shares[:1]), b"m")
    assert not g.verify(replace(sig, signers=sig.signers[:1], shares=sig.shares[:1]), b"m")


def test_groups_with_different_labels_do_not_mix():
    kr = Keyring(b"x")
    g1 = ThresholdGroup(kr, range(4), 3, b"sign")
    g2 = ThresholdGroup(kr, range(4), 3, b"exec")
    sig = g1.combine([g1.share(kr.key(i), b"m") for i in range(3)])
    assert not g2.verify(sig, b"m")


def test_functional_wrappers():
    kr, g = group_of(2, 3)
    p = ThresholdParams(2, 3)
    sig = threshold_combine(g, [threshold_share(g, kr.key(i), b"m") for i in (0, 2)], p)
    assert threshold_verify(g, sig, b"m", p)


@pytest.mark.parametrize("t,n", [(2, 3), (3, 4), (5, 7)])
def test_threshold_exhaustive_over_subsets(t, n):
    kr, g = group_of(t, n)
    shares = {i: g.share(kr.key(i), b"payload") for i in range(n)}
    for k in range(n + 1):
        for subset in itertools.combinations(range(n), k):
            picked = [shares[i] for i in subset]
            if k >= t:
                assert g.verify(g.combine(picked), b"payload")
            else:
                with pytest.raises(TooFewShares):
                    g.combine(picked)


def test_verify_quorum_counts_distinct_members(keyring):
    auths = [keyring.sign(i, b"m") for i in (0, 1, 1)]
    assert not verify_quorum(keyring, b"m", auths, range(4), 3)
    assert verify_quorum(keyring, b"m", auths + [keyring.sign(3, b"m")], range(4), 3)
    keyring.add("c0")
    assert not verify_quorum(keyring, b"m", auths + [keyring.sign("c0", b"m")], range(4), 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n), st.sets(st.integers(0, n - 1)))),
       st.binary(max_size=32))
def test_combine_succeeds_iff_enough_distinct_shares(params, msg):
    n, t, subset = params
    kr, g = group_of(t, n, b"prop")
    picked = [g.share(kr.key(i), msg) for i in sorted(subset)]
    if len(subset) >= t:
        assert g.verify(g.combine(picked), msg)
    else:
        with pytest.raises(TooFewShares):
            g.combine(picked)
