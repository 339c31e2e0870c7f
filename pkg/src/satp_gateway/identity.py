"""Off-chain identity checks (API3): a deterministic identity-provider stub
and the caching client gateways use to query it."""

from __future__ import annotations

import enum
import threading
from dataclasses import asdict, dataclass, replace
from typing import Any, Mapping

from . import encoding
from .clock import LogicalClock
from .crypto import KeyPair, verify

ATTESTATION_DOMAIN = b"satp.attestation.v1"


class Verdict(str, enum.Enum):
    VERIFIED = "VERIFIED"
    UNKNOWN = "UNKNOWN"
    BLOCKED = "BLOCKED"


class IdpUnavailable(Exception):
    pass


@dataclass(frozen=True)
class IdentityAttestation:
    subject: str
    attester: str
    verdict: str
    expiry: int
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        body = asdict(self)
        del body["signature"]
        return ATTESTATION_DOMAIN + encoding.encode(body)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class IdentityProvider:
    """Scenario-configured stub: verdicts come from a static table."""

    def __init__(self, key: KeyPair, verdicts: Mapping[str, str] | None = None,
                 online: bool = True, ttl: int = 1000, clock: LogicalClock | None = None,
                 default: str = Verdict.UNKNOWN.value):
        self.key = key
        self.verdicts = {k: Verdict(v).value for k, v in (verdicts or {}).items()}
        self.online = online
        self.ttl = ttl
        self.clock = clock or LogicalClock()
        self.default = Verdict(default).value
        self.calls = 0

    @property
    def idp_id(self) -> str:
        return self.key.owner

    def attest(self, subject: str) -> IdentityAttestation:
        self.calls += 1
        if not self.online:
            raise IdpUnavailable(self.idp_id)
        att = IdentityAttestation(
            subject=subject,
            attester=self.idp_id,
            verdict=self.verdicts.get(subject, self.default),
            expiry=self.clock.now + self.ttl,
        )
        return replace(att, signature=self.key.sign(att.signing_bytes()))


class IdentityClient:
    """Gateway-side API3 client; caches attestations until they expire."""

    def __init__(self, provider: IdentityProvider | None, idp_public_key: bytes | None,
                 clock: LogicalClock):
        self.provider = provider
        self.idp_public_key = idp_public_key
        self.clock = clock
        self._cache: dict[str, IdentityAttestation] = {}
        self._lock = threading.Lock()

    def verify_identity(self, party: str) -> IdentityAttestation:
        with self._lock:
            cached = self._cache.get(party)
            if cached is not None and cached.expiry > self.clock.now:
                return cached
        if self.provider is None:
            raise IdpUnavailable("no identity provider configured")
        att = self.provider.attest(party)
        if not verify(self.idp_public_key, att.signing_bytes(), att.signature):
            raise IdpUnavailable(f"attestation for {party} failed signature check")
        with self._lock:
            self._cache[party] = att
        return att

    def verdict(self, party: str) -> str:
        """Verdict string, with ``UNAVAILABLE`` standing in for a failed call."""
        try:
            return self.verify_identity(party).verdict
        except IdpUnavailable:
            return "UNAVAILABLE"
