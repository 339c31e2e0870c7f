"""Signed receipts proving that a ledger operation happened on a network."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

from . import encoding
from .crypto import KeyPair, verify

RECEIPT_DOMAIN = b"satp.receipt.v1"


@dataclass(frozen=True)
class EvidenceReceipt:
    network: str
    ledger_seq: int
    op: str
    asset_id: str
    session_id: str
    amount: int
    profile_id: str
    payload_hash: bytes
    signer: str
    signature: bytes = b""

    def body(self) -> dict[str, Any]:
        data = asdict(self)
        del data["signature"]
        return data

    def signing_bytes(self) -> bytes:
        return RECEIPT_DOMAIN + encoding.encode(self.body())

    def signed(self, key: KeyPair) -> "EvidenceReceipt":
        unsigned = EvidenceReceipt(**{**self.body(), "signer": key.owner})
        return EvidenceReceipt(**{**unsigned.body(), "signature": key.sign(unsigned.signing_bytes())})

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvidenceReceipt":
        if not isinstance(data, dict) or set(data) != _RECEIPT_FIELDS:
            raise encoding.DecodeError("malformed evidence receipt")
        return cls(**data)


_RECEIPT_FIELDS = set(EvidenceReceipt.__dataclass_fields__)


@dataclass(frozen=True)
class Verdict:
    """Accept/reject outcome with a reason code; truthy iff accepted."""

    ok: bool
    reason: str | None = None
    detail: str | None = None

    def __bool__(self) -> bool:
        return self.ok


ACCEPT = Verdict(True)


def verify_evidence(
    receipt: EvidenceReceipt, expected: dict[str, Any], signer_key: bytes | None
) -> Verdict:
    """Check the receipt's signature, then each expected field in turn."""
    if not isinstance(receipt, EvidenceReceipt):
        return Verdict(False, "SignatureInvalid", "not a receipt")
    if not verify(signer_key, receipt.signing_bytes(), receipt.signature):
        return Verdict(False, "SignatureInvalid", receipt.signer)
    for name, value in expected.items():
        if getattr(receipt, name) != value:
            return Verdict(False, "FieldMismatch", name)
    return ACCEPT
