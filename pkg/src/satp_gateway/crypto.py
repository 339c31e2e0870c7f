"""Hashing and signatures.

The reference suite is Ed25519 over SHA-256 digests of canonical encodings.
Suites are swappable: everything signs and hashes through a ``CryptoSuite``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

ZERO_HASH = bytes(32)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@lru_cache(maxsize=4096)
def _ed25519_public(public_key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_key)


@dataclass(frozen=True)
class CryptoSuite:
    name: str
    hash: Callable[[bytes], bytes]
    public_from_secret: Callable[[bytes], bytes]
    sign: Callable[[bytes, bytes], bytes]
    verify: Callable[[bytes, bytes, bytes], bool]


def _ed25519_public_from_secret(secret: bytes) -> bytes:
    key = Ed25519PrivateKey.from_private_bytes(secret)
    return key.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


@lru_cache(maxsize=1024)
def _ed25519_private(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


def _ed25519_sign(secret: bytes, data: bytes) -> bytes:
    return _ed25519_private(secret).sign(data)


def _ed25519_verify(public_key: bytes, data: bytes, signature: bytes) -> bool:
    try:
        _ed25519_public(bytes(public_key)).verify(bytes(signature), data)
    except (InvalidSignature, ValueError):
        return False
    return True


ED25519_SHA256 = CryptoSuite(
    name="ed25519-sha256",
    hash=sha256,
    public_from_secret=_ed25519_public_from_secret,
    sign=_ed25519_sign,
    verify=_ed25519_verify,
)

SUITE = ED25519_SHA256


def digest(data: bytes) -> bytes:
    return SUITE.hash(data)


@dataclass(frozen=True)
class KeyPair:
    """A named signing identity (gateway, network notary or identity provider)."""

    owner: str
    secret: bytes
    public: bytes

    @classmethod
    def from_secret(cls, owner: str, secret: bytes) -> "KeyPair":
        return cls(owner, secret, SUITE.public_from_secret(secret))

    @classmethod
    def from_seed(cls, owner: str, seed: str | bytes) -> "KeyPair":
        """Deterministic fixture key: secret = SHA-256(seed)."""
        raw = seed.encode("utf-8") if isinstance(seed, str) else seed
        return cls.from_secret(owner, sha256(raw))

    def sign(self, data: bytes) -> bytes:
        return SUITE.sign(self.secret, data)

    def __repr__(self) -> str:
        return f"KeyPair(owner={self.owner!r}, public={self.public.hex()[:16]}...)"


def verify(public_key: bytes | None, data: bytes, signature: bytes) -> bool:
    if public_key is None or not isinstance(signature, (bytes, bytearray)):
        return False
    return SUITE.verify(public_key, data, signature)


class KeyRing(dict):
    """Public keys by signer id: gateways, networks and identity providers."""

    def public(self, owner: str) -> bytes | None:
        return self.get(owner)

    def to_json(self) -> dict[str, str]:
        return {k: v.hex() for k, v in sorted(self.items())}

    @classmethod
    def from_json(cls, data: dict[str, str]) -> "KeyRing":
        return cls({k: bytes.fromhex(v) for k, v in data.items()})
