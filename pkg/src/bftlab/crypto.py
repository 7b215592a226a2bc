"""Simulation-grade authenticators and t-of-n threshold signatures.

Every tag is a keyed SHA3-256 hash. Verification re-derives the tag from the
signer's secret, which the :class:`Keyring` holds on behalf of the group (it
plays the role of a PKI). The interfaces mirror real schemes so that an actual
threshold scheme could be dropped in without touching protocol code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .codec import sha3

SIGNATURE = "sig"
MAC = "mac"


class CryptoError(ValueError):
    pass


class NotInGroup(CryptoError):
    pass


class TooFewShares(CryptoError):
    pass


class MixedMessages(CryptoError):
    pass


@dataclass(frozen=True)
class KeyMaterial:
    replica_id: str
    secret: bytes
    public_handle: bytes


@dataclass(frozen=True)
class Authenticator:
    kind: str
    tag: bytes
    signer: str


@dataclass(frozen=True)
class ThresholdParams:
    t: int
    n: int

    def __post_init__(self):
        if not 1 <= self.t <= self.n:
            raise CryptoError(f"threshold needs 1 <= t <= n, got t={self.t} n={self.n}")


@dataclass(frozen=True)
class ThresholdShare:
    msg_digest: bytes
    signer: str
    share: bytes


@dataclass(frozen=True)
class ThresholdSignature:
    msg_digest: bytes
    signers: tuple[str, ...]
    shares: tuple[bytes, ...]


def _tag(secret: bytes, label: bytes, msg: bytes) -> bytes:
    return sha3(secret, label, msg)


def make_key(name: str, seed: bytes = b"") -> KeyMaterial:
    secret = sha3(b"secret", seed, name.encode())
    return KeyMaterial(name, secret, sha3(b"public", secret))


def sign(key: KeyMaterial, msg: bytes, kind: str = SIGNATURE) -> Authenticator:
    if kind == SIGNATURE:
        return Authenticator(SIGNATURE, _tag(key.secret, b"sig", msg), key.replica_id)
    if kind == MAC:
        return Authenticator(MAC, _tag(key.secret, b"mac", msg)[:16], key.replica_id)
    raise CryptoError(f"unknown authenticator kind {kind!r}")


class Keyring:
    """Registry of key material for every principal in a run.

    Keys are derived from ``seed`` so two runs with the same seed produce
    identical authenticators.
    """

    def __init__(self, seed: bytes = b""):
        self.seed = seed
        self._by_name: dict[str, KeyMaterial] = {}
        self._by_handle: dict[bytes, KeyMaterial] = {}

    def add(self, name) -> KeyMaterial:
        name = str(name)
        key = self._by_name.get(name)
        if key is None:
            key = make_key(name, self.seed)
            self._by_name[name] = key
            self._by_handle[key.public_handle] = key
        return key

    def key(self, name) -> KeyMaterial:
        try:
            return self._by_name[str(name)]
        except KeyError:
            raise CryptoError(f"no key registered for {name!r}") from None

    def __contains__(self, name) -> bool:
        return str(name) in self._by_name

    def handle(self, name) -> bytes:
        return self.key(name).public_handle

    def sign(self, name, msg: bytes, kind: str = SIGNATURE) -> Authenticator:
        return sign(self.key(name), msg, kind)

    def verify(self, public_handle: bytes, msg: bytes, auth: Authenticator) -> bool:
        key = self._by_handle.get(public_handle)
        if key is None or auth.signer != key.replica_id:
            return False
        try:
            expected = sign(key, msg, auth.kind)
        except CryptoError:
            return False
        return expected.tag == auth.tag

    def verify_from(self, name, msg: bytes, auth: Authenticator) -> bool:
        """Verify ``auth`` and require that it was produced by ``name``."""
        key = self._by_name.get(str(name))
        if key is None:
            return False
        return self.verify(key.public_handle, msg, auth)

    def verify_any(self, msg: bytes, auth: Authenticator) -> bool:
        """Verify against whichever registered principal ``auth`` claims."""
        return self.verify_from(auth.signer, msg, auth)


class ThresholdGroup:
    """A t-of-n threshold group over named members of a :class:`Keyring`."""

    def __init__(self, keyring: Keyring, members: Iterable, t: int, label: bytes = b""):
        self.keyring = keyring
        self.members = tuple(str(m) for m in members)
        self._member_set = frozenset(self.members)
        self.params = ThresholdParams(t, len(self.members))
        self.label = label
        for m in self.members:
            keyring.add(m)

    @property
    def t(self) -> int:
        return self.params.t

    def with_threshold(self, t: int) -> "ThresholdGroup":
        return ThresholdGroup(self.keyring, self.members, t, self.label)

    def _share_tag(self, key: KeyMaterial, digest: bytes) -> bytes:
        return _tag(key.secret, b"tshare" + self.label, digest)

    def share(self, key: KeyMaterial, msg: bytes) -> ThresholdShare:
        if key.replica_id not in self._member_set:
            raise NotInGroup(f"{key.replica_id} is not a member of this threshold group")
        digest = sha3(msg)
        return ThresholdShare(digest, key.replica_id, self._share_tag(key, digest))

    def share_valid(self, share: ThresholdShare) -> bool:
        if share.signer not in self._member_set:
            return False
        key = self.keyring.key(share.signer)
        return self._share_tag(key, share.msg_digest) == share.share

    def combine(self, shares: Iterable[ThresholdShare], t: int | None = None) -> ThresholdSignature:
        t = self.params.t if t is None else t
        shares = list(shares)
        digests = {s.msg_digest for s in shares}
        if len(digests) > 1:
            raise MixedMessages("shares cover different messages")
        good: dict[str, bytes] = {}
        for s in shares:
            if s.signer not in good and self.share_valid(s):
                good[s.signer] = s.share
        if len(good) < t:
            raise TooFewShares(f"{len(good)} valid distinct shares, need {t}")
        signers = tuple(sorted(good))
        return ThresholdSignature(digests.pop(), signers, tuple(good[s] for s in signers))

    def verify(self, sig: ThresholdSignature, msg: bytes, t: int | None = None) -> bool:
        t = self.params.t if t is None else t
        if sig.msg_digest != sha3(msg):
            return False
        if len(sig.signers) != len(sig.shares) or len(set(sig.signers)) != len(sig.signers):
            return False
        if len(sig.signers) < t:
            return False
        for signer, tag in zip(sig.signers, sig.shares):
            if not self.share_valid(ThresholdShare(sig.msg_digest, signer, tag)):
                return False
        return True


def threshold_share(group: ThresholdGroup, key: KeyMaterial, msg: bytes) -> ThresholdShare:
    return group.share(key, msg)


def threshold_combine(group: ThresholdGroup, shares: Iterable[ThresholdShare], params: ThresholdParams | None = None) -> ThresholdSignature:
    return group.combine(shares, None if params is None else params.t)


def threshold_verify(group: ThresholdGroup, sig: ThresholdSignature, msg: bytes, params: ThresholdParams | None = None) -> bool:
    return group.verify(sig, msg, None if params is None else params.t)


def verify_quorum(keyring: Keyring, msg: bytes, auths: Iterable[Authenticator], members: Iterable, need: int) -> bool:
    """True iff at least ``need`` distinct members produced valid ``auths`` over ``msg``."""
    allowed = {str(m) for m in members}
    seen = set()
    for a in auths:
        if a.signer in allowed and a.signer not in seen and keyring.verify_from(a.signer, msg, a):
            seen.add(a.signer)
    return len(seen) >= need
