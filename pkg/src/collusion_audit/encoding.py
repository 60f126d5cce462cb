"""Canonical byte serialization and hashing.

Every commitment, ledger leaf, and receipt in this package is a SHA-256
digest over a length-prefixed concatenation of fields in a declared order.
The encoding is fixed byte-exactly so that digests are reproducible across
platforms:

  int    -> 8-byte big-endian (unsigned)
  float  -> 8-byte IEEE-754 big-endian
  str    -> UTF-8 bytes
  bytes  -> as-is

Each encoded field is prefixed with its 4-byte big-endian length.
"""

from __future__ import annotations

import hashlib
import struct

__all__ = ["canonical", "sha256", "hash_fields"]


def _encode_field(value) -> bytes:
    if isinstance(value, bool):
        raise TypeError("booleans have no canonical encoding")
    if isinstance(value, bytes):
        raw = value
    elif isinstance(value, str):
        raw = value.encode("utf-8")
    elif isinstance(value, int):
        if value < 0:
            raise ValueError("negative integers have no canonical encoding")
        raw = value.to_bytes(8, "big")
    elif isinstance(value, float):
        raw = struct.pack(">d", value)
    else:
        raise TypeError(f"no canonical encoding for {type(value).__name__}")
    return len(raw).to_bytes(4, "big") + raw


def canonical(*fields) -> bytes:
    """Length-prefixed concatenation of fields in the given order."""
    return b"".join(_encode_field(f) for f in fields)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_fields(*fields) -> bytes:
    """SHA-256 over the canonical serialization of fields."""
    return sha256(canonical(*fields))
