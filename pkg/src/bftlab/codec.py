"""Canonical byte encoding shared by ledger digests and the message wire format.

Fields are concatenated in declaration order. Integers are 8-byte big-endian
(signed), byte strings and text are prefixed with their 8-byte length, tuples
with their 8-byte item count. A frame is a 1-byte type tag followed by the
canonical encoding of the message body.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
import types
import typing
from typing import Any, Callable, Union

_INT = struct.Struct(">q")

#: tag -> message class
FRAMES: dict[int, type] = {}
_FIELD_CODECS: dict[type, list[tuple[str, Callable, Callable]]] = {}


class CodecError(ValueError):
    pass


def _enc_int(v: int, out: list) -> None:
    out.append(_INT.pack(v))


def _dec_int(buf: memoryview, pos: int) -> tuple[int, int]:
    return _INT.unpack_from(buf, pos)[0], pos + 8


def _enc_bytes(v: bytes, out: list) -> None:
    out.append(_INT.pack(len(v)))
    out.append(bytes(v))


def _dec_bytes(buf: memoryview, pos: int) -> tuple[bytes, int]:
    n = _INT.unpack_from(buf, pos)[0]
    pos += 8
    if n < 0 or pos + n > len(buf):
        raise CodecError("truncated byte field")
    return bytes(buf[pos:pos + n]), pos + n


def _enc_str(v: str, out: list) -> None:
    _enc_bytes(v.encode(), out)


def _dec_str(buf, pos):
    raw, pos = _dec_bytes(buf, pos)
    return raw.decode(), pos


def _enc_bool(v: bool, out: list) -> None:
    out.append(b"\x01" if v else b"\x00")


def _dec_bool(buf, pos):
    if buf[pos] > 1:
        raise CodecError("bool marker must be 0 or 1")
    return buf[pos] == 1, pos + 1


# node identifiers are either replica indices (int) or client names (str)
def _enc_node(v, out):
    if isinstance(v, int):
        out.append(b"i")
        _enc_int(v, out)
    else:
        out.append(b"s")
        _enc_str(v, out)


def _dec_node(buf, pos):
    kind = bytes(buf[pos:pos + 1])
    if kind == b"i":
        return _dec_int(buf, pos + 1)
    if kind == b"s":
        return _dec_str(buf, pos + 1)
    raise CodecError(f"bad node id marker {kind!r}")


def _enc_frame_field(v, out):
    _enc_bytes(encode_frame(v), out)


def _dec_frame_field(buf, pos):
    raw, pos = _dec_bytes(buf, pos)
    return decode_frame(raw), pos


def _codec_for(tp) -> tuple[Callable, Callable]:
    if tp is int:
        return _enc_int, _dec_int
    if tp is bytes:
        return _enc_bytes, _dec_bytes
    if tp is str:
        return _enc_str, _dec_str
    if tp is bool:
        return _enc_bool, _dec_bool
    if tp is Any:
        return _enc_frame_field, _dec_frame_field
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union or origin is types.UnionType:
        non_none = [a for a in args if a is not type(None)]
        if set(non_none) == {int, str}:
            if type(None) in args:
                return _optional(_enc_node, _dec_node)
            return _enc_node, _dec_node
        if len(non_none) == 1 and type(None) in args:
            enc, dec = _codec_for(non_none[0])
            return _optional(enc, dec)
        raise TypeError(f"unsupported union {tp}")
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            enc, dec = _codec_for(args[0])

            def enc_seq(v, out, enc=enc):
                _enc_int(len(v), out)
                for item in v:
                    enc(item, out)

            def dec_seq(buf, pos, dec=dec):
                n, pos = _dec_int(buf, pos)
                if n < 0 or n > len(buf) - pos:
                    raise CodecError("bad sequence length")
                items = []
                for _ in range(n):
                    item, pos = dec(buf, pos)
                    items.append(item)
                return tuple(items), pos

            return enc_seq, dec_seq
        raise TypeError(f"only homogeneous tuples are supported: {tp}")
    if dataclasses.is_dataclass(tp):
        return (lambda v, out: _encode_into(v, out)), (lambda buf, pos, tp=tp: _decode_from(tp, buf, pos))
    raise TypeError(f"no canonical encoding for {tp!r}")


def _optional(enc, dec):
    def enc_opt(v, out):
        if v is None:
            out.append(b"\x00")
        else:
            out.append(b"\x01")
            enc(v, out)

    def dec_opt(buf, pos):
        if buf[pos] == 0:
            return None, pos + 1
        if buf[pos] != 1:
            raise CodecError("optional marker must be 0 or 1")
        return dec(buf, pos + 1)

    return enc_opt, dec_opt


def _field_codecs(cls) -> list[tuple[str, Callable, Callable]]:
    codecs = _FIELD_CODECS.get(cls)
    if codecs is None:
        hints = typing.get_type_hints(cls)
        codecs = []
        for f in dataclasses.fields(cls):
            enc, dec = _codec_for(hints[f.name])
            codecs.append((f.name, enc, dec))
        _FIELD_CODECS[cls] = codecs
    return codecs


def _encode_into(obj, out: list) -> None:
    for name, enc, _ in _field_codecs(type(obj)):
        enc(getattr(obj, name), out)


def _decode_from(cls, buf, pos):
    values = {}
    for name, _, dec in _field_codecs(cls):
        values[name], pos = dec(buf, pos)
    return cls(**values), pos


def encode(obj) -> bytes:
    """Canonical encoding of a dataclass value (no type tag)."""
    out: list[bytes] = []
    _encode_into(obj, out)
    return b"".join(out)


def decode(cls, data: bytes):
    try:
        obj, pos = _decode_from(cls, memoryview(data), 0)
    except (struct.error, IndexError, UnicodeDecodeError) as e:
        raise CodecError(f"malformed {cls.__name__}: {e}") from None
    if pos != len(data):
        raise CodecError(f"{len(data) - pos} trailing bytes after {cls.__name__}")
    return obj


def frame(tag: int):
    """Register a dataclass as a wire message with the given 1-byte tag."""
    if not 0 < tag < 256:
        raise ValueError("frame tags are single non-zero bytes")

    def register(cls):
        if tag in FRAMES and FRAMES[tag] is not cls:
            raise ValueError(f"tag {tag} already used by {FRAMES[tag].__name__}")
        FRAMES[tag] = cls
        cls.TAG = tag
        return cls

    return register


def encode_frame(msg) -> bytes:
    return bytes((type(msg).TAG,)) + encode(msg)


def decode_frame(data: bytes):
    if not data:
        raise CodecError("empty frame")
    cls = FRAMES.get(data[0])
    if cls is None:
        raise CodecError(f"unknown frame tag {data[0]}")
    return decode(cls, data[1:])


def sha3(*parts: bytes) -> bytes:
    h = hashlib.sha3_256()
    for p in parts:
        h.update(p)
    return h.digest()


def pack(*values) -> bytes:
    """Ad-hoc canonical encoding for signing tuples of ints/bytes/str."""
    out: list[bytes] = []
    for v in values:
        if isinstance(v, bool):
            _enc_bool(v, out)
        elif isinstance(v, int):
            _enc_int(v, out)
        elif isinstance(v, (bytes, bytearray)):
            _enc_bytes(bytes(v), out)
        elif isinstance(v, str):
            _enc_str(v, out)
        else:
            raise TypeError(f"cannot pack {type(v).__name__}")
    return b"".join(out)
