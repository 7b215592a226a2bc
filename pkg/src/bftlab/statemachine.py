"""Deterministic key-value state machine executed by every replica.

Payloads are ``SET <key> <value>`` or ``GET <key>``. Each applied write returns
an undo record so speculative execution can be rolled back.
"""

from __future__ import annotations

from typing import Optional

from . import codec


class KVStore:
    def __init__(self):
        self.data: dict[bytes, bytes] = {}

    def apply(self, payload: bytes) -> tuple[bytes, Optional[tuple[bytes, Optional[bytes]]]]:
        parts = payload.split(b" ", 2)
        op = parts[0]
        if op == b"SET" and len(parts) == 3:
            key, value = parts[1], parts[2]
            old = self.data.get(key)
            self.data[key] = value
            return b"OK", (key, old)
        if op == b"GET" and len(parts) >= 2:
            return self.data.get(parts[1], b""), None
        return b"ERR", None

    def undo(self, record) -> None:
        if record is None:
            return
        key, old = record
        if old is None:
            self.data.pop(key, None)
        else:
            self.data[key] = old

    def fingerprint(self) -> bytes:
        return codec.sha3(*(codec.pack(k, v) for k, v in sorted(self.data.items())))


def make_payload(client_id: str, nonce: int) -> bytes:
    """Workload generator: alternate writes and reads over a small shared key space."""
    key = f"k{(nonce * 7 + len(client_id)) % 5}"
    if nonce % 3 == 2:
        return f"GET {key}".encode()
    return f"SET {key} {client_id}:{nonce}".encode()
