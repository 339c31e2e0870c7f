"""Canonical binary encoding shared by hashing, signing, the wire and the WAL.

One encoder for every representation keeps hashes, signatures and stored
records bit-identical. The layout is documented in ``docs/encoding.md``.

Each value is a one-byte tag followed by its body:

    0x00 None
    0x01 False
    0x02 True
    0x03 int     8-byte signed big-endian
    0x04 str     u32 big-endian byte length + UTF-8
    0x05 bytes   u32 big-endian length + raw bytes
    0x06 list    u32 big-endian count + items
    0x07 map     u32 big-endian count + (str key, value) pairs, keys sorted
                 by their UTF-8 bytes, no duplicates

Decoding is strict: anything that would not re-encode to the same bytes
is rejected.
"""

from __future__ import annotations

import base64
import binascii
import struct
from typing import Any, Iterable

T_NONE = 0x00
T_FALSE = 0x01
T_TRUE = 0x02
T_INT = 0x03
T_STR = 0x04
T_BYTES = 0x05
T_LIST = 0x06
T_MAP = 0x07

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

_U32 = struct.Struct(">I")
_I64 = struct.Struct(">q")


class DecodeError(ValueError):
    """Raised for any malformed or non-canonical input."""


def _encode_into(value: Any, out: bytearray) -> None:
    if value is None:
        out.append(T_NONE)
    elif value is True:
        out.append(T_TRUE)
    elif value is False:
        out.append(T_FALSE)
    elif isinstance(value, int):
        if not INT_MIN <= value <= INT_MAX:
            raise ValueError(f"integer out of 64-bit range: {value}")
        out.append(T_INT)
        out += _I64.pack(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(T_STR)
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        out.append(T_BYTES)
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(value, (list, tuple)):
        out.append(T_LIST)
        out += _U32.pack(len(value))
        for item in value:
            _encode_into(item, out)
    elif isinstance(value, dict):
        items = []
        for key, item in value.items():
            if not isinstance(key, str):
                raise TypeError(f"map keys must be str, got {type(key).__name__}")
            items.append((key.encode("utf-8"), item))
        items.sort(key=lambda kv: kv[0])
        out.append(T_MAP)
        out += _U32.pack(len(items))
        for raw_key, item in items:
            out.append(T_STR)
            out += _U32.pack(len(raw_key))
            out += raw_key
            _encode_into(item, out)
    else:
        raise TypeError(f"cannot canonically encode {type(value).__name__}")


def encode(value: Any) -> bytes:
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError("truncated input")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def value(self, depth: int = 0) -> Any:
        if depth > 64:
            raise DecodeError("nesting too deep")
        tag = self.take(1)[0]
        if tag == T_NONE:
            return None
        if tag == T_FALSE:
            return False
        if tag == T_TRUE:
            return True
        if tag == T_INT:
            return _I64.unpack(self.take(8))[0]
        if tag == T_STR:
            return self._str_body()
        if tag == T_BYTES:
            return self.take(self.u32())
        if tag == T_LIST:
            count = self.u32()
            if count > len(self.buf) - self.pos:
                raise DecodeError("list count exceeds input")
            return [self.value(depth + 1) for _ in range(count)]
        if tag == T_MAP:
            count = self.u32()
            if count > len(self.buf) - self.pos:
                raise DecodeError("map count exceeds input")
            result: dict[str, Any] = {}
            prev: bytes | None = None
            for _ in range(count):
                if self.take(1)[0] != T_STR:
                    raise DecodeError("map key is not a string")
                raw_key = self.take(self.u32())
                if prev is not None and raw_key <= prev:
                    raise DecodeError("map keys unsorted or duplicated")
                prev = raw_key
                try:
                    key = raw_key.decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise DecodeError("invalid UTF-8 in map key") from exc
                result[key] = self.value(depth + 1)
            return result
        raise DecodeError(f"unknown tag 0x{tag:02x}")

    def _str_body(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid UTF-8 in string") from exc


def decode(data: bytes) -> Any:
    reader = _Reader(bytes(data))
    value = reader.value()
    if reader.pos != len(reader.buf):
        raise DecodeError(f"{len(reader.buf) - reader.pos} trailing bytes")
    return value


# -- framing ---------------------------------------------------------------

def frame(payload: bytes) -> bytes:
    """Length-prefix a canonical payload for the wire."""
    return _U32.pack(len(payload)) + payload


def unframe(data: bytes) -> bytes:
    if len(data) < 4:
        raise DecodeError("frame shorter than length prefix")
    (length,) = _U32.unpack(data[:4])
    if len(data) - 4 != length:
        raise DecodeError(f"frame length {length} does not match body {len(data) - 4}")
    return bytes(data[4:])


# -- newline-delimited records (exports, bundles, traces) -----------------

def dump_lines(records: Iterable[Any]) -> bytes:
    """Serialize records as one base64 canonical encoding per line."""
    return b"".join(base64.b64encode(encode(r)) + b"\n" for r in records)


def load_line(line: bytes) -> tuple[Any, bytes]:
    """Decode one export line, returning the record and its canonical bytes."""
    try:
        raw = base64.b64decode(line, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise DecodeError("invalid base64 line") from exc
    if base64.b64encode(raw) != line:
        raise DecodeError("non-canonical base64 line")
    return decode(raw), raw


def load_lines(data: bytes) -> list[Any]:
    if data and not data.endswith(b"\n"):
        raise DecodeError("export must end with a newline")
    lines = data.split(b"\n")[:-1] if data else []
    return [load_line(line)[0] for line in lines]
