"""Agreement check over the per-replica chains stored in a report."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from ..ledger import FirstInvalid, batch_digest, chain_from_json, verify_chain


@dataclass(frozen=True)
class Ok:
    pass


@dataclass(frozen=True)
class Violation:
    replicas: tuple[str, str]
    seq: int
    digests: tuple[str, str]


@dataclass(frozen=True)
class BrokenChain:
    replica: str
    index: int


Verdict = Union[Ok, Violation, BrokenChain]


def content_digests(chain_json: list[dict]) -> list[str]:
    """Per-position digest of the ordered transactions (block metadata excluded)."""
    chain = chain_from_json(chain_json)
    return [batch_digest(b.transactions).hex() for b in chain.blocks]


def check(chains: dict, faulty, trim: int = 0) -> Verdict:
    faulty = {str(r) for r in faulty}
    honest = sorted((r for r in chains if r not in faulty), key=lambda r: (len(r), r))
    seqs = {}
    for r in honest:
        res = verify_chain(chain_from_json(chains[r]))
        if isinstance(res, FirstInvalid):
            return BrokenChain(r, res.index)
        d = content_digests(chains[r])
        seqs[r] = d[: max(1, len(d) - trim)] if trim else d
    for i, a in enumerate(honest):
        for b in honest[i + 1:]:
            da, db = seqs[a], seqs[b]
            for k in range(min(len(da), len(db))):
                if da[k] != db[k]:
                    return Violation((a, b), k, (da[k], db[k]))
    return Ok()


def verdict_dict(v: Verdict) -> dict:
    if isinstance(v, Ok):
        return {"ok": True}
    if isinstance(v, Violation):
        return {"ok": False, "kind": "violation", "replicas": list(v.replicas), "seq": v.seq, "digests": list(v.digests)}
    return {"ok": False, "kind": "broken_chain", "replica": v.replica, "index": v.index}


def verify_chains(chains: dict, faulty, trim: int = 0) -> dict:
    return verdict_dict(check(chains, faulty, trim))


def trim_for(scenario: dict) -> int:
    """Unconfirmed suffix ignored by the check: the last k_conf blocks of longest-chain protocols."""
    if scenario.get("protocol") in ("pow", "pos"):
        return int(scenario.get("knobs", {}).get("k_conf", 6))
    return 0


def verify_safety(report) -> Verdict:
    """Recompute the verdict from the chains alone."""
    return check(report.chains, report.faulty, trim_for(report.scenario))
