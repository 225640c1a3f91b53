"""
Canonical byte encoding for everything that is hashed, signed or sent.

Integers are unsigned 64-bit big-endian. Strings (UTF-8) and byte strings
carry an 8-byte big-endian length prefix, sequences an 8-byte element count,
records their fields in declaration order with no framing of their own.
Fixed-size values (digests) are written as raw bytes. An optional record
field is a sequence of zero or one element.

Decoding is driven by the record's type hints, so any frozen dataclass built
from the supported kinds round-trips without per-type code.
"""
from __future__ import annotations

import dataclasses
import enum
import functools
import types
import typing
from typing import Any, ClassVar

U64_MAX = 2**64 - 1


class EncodingError(ValueError):
    """Value cannot be encoded, or bytes do not decode to the requested kind."""


@dataclasses.dataclass(frozen=True, order=True)
class FixedBytes:
    value: bytes
    SIZE: ClassVar[int] = 32

    def __post_init__(self):
        if not isinstance(self.value, bytes) or len(self.value) != self.SIZE:
            raise ValueError(f"{type(self).__name__} must be exactly {self.SIZE} bytes")

    def hex(self) -> str:
        return self.value.hex()

    def as_int(self) -> int:
        return int.from_bytes(self.value, "big")


def _u64(number: int) -> bytes:
    if number < 0 or number > U64_MAX:
        raise EncodingError(f"integer out of u64 range: {number}")
    return number.to_bytes(8, "big")


def _optional_inner(kind: Any) -> Any:
    args = [arg for arg in typing.get_args(kind) if arg is not type(None)]
    if len(args) != 1 or len(typing.get_args(kind)) != 2:
        raise EncodingError(f"only optional unions are encodable: {kind!r}")
    return args[0]


def _is_union(kind: Any) -> bool:
    return typing.get_origin(kind) in (typing.Union, types.UnionType)


@functools.lru_cache(maxsize=None)
def _record_fields(cls: type) -> tuple[tuple[str, Any], ...]:
    hints = typing.get_type_hints(cls)
    return tuple((f.name, hints[f.name]) for f in dataclasses.fields(cls))


def canonical_encode(value: Any) -> bytes:
    """Encode a value built from u64 ints, strings, bytes, digests, sequences and records."""
    out = bytearray()
    _encode(value, out, None)
    return bytes(out)


def _encode(value: Any, out: bytearray, kind: Any) -> None:
    if kind is not None:
        if _is_union(kind):
            if value is None:
                out += _u64(0)
                return
            out += _u64(1)
            _encode(value, out, _optional_inner(kind))
            return
        if typing.get_origin(kind) in (tuple, list):
            if not isinstance(value, (tuple, list)):
                raise EncodingError(f"expected a sequence, got {type(value).__name__}")
            args = typing.get_args(kind)
            item_kind = args[0] if args else None
            out += _u64(len(value))
            for item in value:
                _encode(item, out, item_kind)
            return
    _encode_untyped(value, out)


def _encode_untyped(value: Any, out: bytearray) -> None:
    if value is None:
        out += _u64(0)
    elif isinstance(value, enum.Enum):
        _encode_untyped(value.value, out)
    elif isinstance(value, bool):
        out += _u64(int(value))
    elif isinstance(value, int):
        out += _u64(value)
    elif isinstance(value, str):
        data = value.encode("utf-8")
        out += _u64(len(data))
        out += data
    elif isinstance(value, (bytes, bytearray)):
        out += _u64(len(value))
        out += bytes(value)
    elif isinstance(value, FixedBytes):
        out += value.value
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        for name, kind in _record_fields(type(value)):
            _encode(getattr(value, name), out, kind)
    elif isinstance(value, (list, tuple)):
        out += _u64(len(value))
        for item in value:
            _encode_untyped(item, out)
    else:
        raise EncodingError(f"cannot encode value of kind {type(value).__name__}")


def canonical_decode(data: bytes, kind: Any) -> Any:
    """Decode bytes produced by canonical_encode back into `kind`; trailing bytes are an error."""
    reader = _Reader(bytes(data))
    value = reader.read(kind)
    if reader.offset != len(reader.data):
        raise EncodingError("trailing bytes after value")
    return value


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise EncodingError("truncated input")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def read(self, kind: Any) -> Any:
        if _is_union(kind):
            count = self.u64()
            if count == 0:
                return None
            if count != 1:
                raise EncodingError("optional field count must be 0 or 1")
            return self.read(_optional_inner(kind))

        origin = typing.get_origin(kind)
        if origin in (tuple, list):
            args = typing.get_args(kind)
            count = self.u64()
            if count > len(self.data) - self.offset:
                raise EncodingError("sequence count exceeds input")
            items = [self.read(args[0]) for _ in range(count)]
            return tuple(items) if origin is tuple else items

        if not isinstance(kind, type):
            raise EncodingError(f"cannot decode kind {kind!r}")
        if issubclass(kind, enum.Enum):
            raw = self.read(str) if issubclass(kind, str) else self.u64()
            try:
                return kind(raw)
            except ValueError as e:
                raise EncodingError(str(e)) from e
        if kind is bool:
            flag = self.u64()
            if flag > 1:
                raise EncodingError("boolean out of range")
            return bool(flag)
        if kind is int:
            return self.u64()
        if kind is str:
            size = self.u64()
            try:
                return self.take(size).decode("utf-8")
            except UnicodeDecodeError as e:
                raise EncodingError("invalid UTF-8") from e
        if kind is bytes:
            return self.take(self.u64())
        if issubclass(kind, FixedBytes):
            return kind(self.take(kind.SIZE))
        if dataclasses.is_dataclass(kind):
            values = {name: self.read(field_kind) for name, field_kind in _record_fields(kind)}
            try:
                return kind(**values)
            except (TypeError, ValueError) as e:
                raise EncodingError(f"invalid {kind.__name__}: {e}") from e
        raise EncodingError(f"cannot decode kind {kind.__name__}")
