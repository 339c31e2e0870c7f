"""In-memory simulated asset networks.

Each ``Ledger`` is a serialization point for one network: operations are
applied one at a time under a lock and appended to an immutable record log.
Lock, unlock, burn and mint are idempotent per session so a recovering
gateway can safely re-issue them.
"""

from __future__ import annotations

import enum
import os
import threading
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import encoding
from .assets import Check, ProfileRegistry, UnknownProfile, ValidationReport, validate_travel_rule
from .clock import LogicalClock
from .crypto import KeyPair, KeyRing, digest
from .evidence import EvidenceReceipt, verify_evidence


class Visibility(str, enum.Enum):
    PRIVATE = "PRIVATE"
    PUBLIC = "PUBLIC"


class AssetStatus(str, enum.Enum):
    FREE = "FREE"
    LOCKED = "LOCKED"
    BURNED = "BURNED"


class LedgerOp(str, enum.Enum):
    ISSUE = "ISSUE"
    LOCK = "LOCK"
    UNLOCK = "UNLOCK"
    BURN = "BURN"
    MINT = "MINT"
    ASSIGN = "ASSIGN"


class LedgerError(Exception):
    pass


class UnknownNetwork(LedgerError, KeyError):
    pass


class UnknownAsset(LedgerError, KeyError):
    pass


class NonPositiveAmount(LedgerError, ValueError):
    pass


class AssetNotFree(LedgerError):
    pass


class ExpiredDeadline(LedgerError):
    pass


class NotLockedBySession(LedgerError):
    pass


class InvalidEvidence(LedgerError):
    pass


class Unauthorized(LedgerError, PermissionError):
    pass


@dataclass(frozen=True)
class NetworkId:
    id: str
    visibility: Visibility = Visibility.PRIVATE

    def __post_init__(self):
        if not self.id:
            raise ValueError("network id must be non-empty")


@dataclass
class Asset:
    asset_id: str
    profile_id: str
    amount: int
    owner: str
    status: AssetStatus
    origin_network: str
    lock_session: str | None = None
    lock_expiry: int | None = None


@dataclass(frozen=True)
class LedgerRecord:
    seq: int
    op: str
    asset_id: str
    session_id: str | None
    amount: int
    profile_id: str
    owner: str
    payload_hash: bytes
    timestamp: int
    order: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LedgerRecord":
        if not isinstance(data, dict) or set(data) != set(cls.__dataclass_fields__):
            raise encoding.DecodeError("malformed ledger record")
        return cls(**data)


def operation_hash(network: str, op: str, asset_id: str, session_id: str | None,
                   amount: int, profile_id: str, owner: str) -> bytes:
    return digest(b"satp.ledger-op.v1" + encoding.encode({
        "network": network, "op": op, "asset_id": asset_id, "session_id": session_id,
        "amount": amount, "profile_id": profile_id, "owner": owner,
    }))


def record_params_hash(network: str, record: LedgerRecord) -> bytes:
    return operation_hash(network, record.op, record.asset_id, record.session_id,
                          record.amount, record.profile_id, record.owner)


class Ledger:
    """One simulated asset network."""

    def __init__(
        self,
        network: NetworkId,
        registry: ProfileRegistry,
        notary: KeyPair,
        trusted_keys: Mapping[str, bytes] | None = None,
        readers: Iterable[str] = (),
        clock: LogicalClock | None = None,
        journal: str | Path | None = None,
    ):
        self.network = network
        self.registry = registry
        self.notary = notary
        # keys of other networks' notaries, for checking burn evidence on mint
        self.trusted_keys = KeyRing(trusted_keys or {})
        self.trusted_keys.setdefault(notary.owner, notary.public)
        self.readers = set(readers)
        self.clock = clock or LogicalClock()
        self._assets: dict[str, Asset] = {}
        self._records: list[LedgerRecord] = []
        self._receipts: dict[tuple[str, str, str], EvidenceReceipt] = {}
        self._mints: dict[str, EvidenceReceipt] = {}
        self._issued = 0
        self._lock = threading.RLock()
        # live mode: records are appended to a file and replayed on start
        self.journal = Path(journal) if journal is not None else None
        if self.journal is not None and self.journal.exists():
            data = self.journal.read_bytes()
            data = data[: data.rfind(b"\n") + 1]
            self.restore(LedgerRecord.from_dict({k: v for k, v in r.items() if k != "network"})
                         for r in encoding.load_lines(data))

    @property
    def id(self) -> str:
        return self.network.id

    @property
    def records(self) -> tuple[LedgerRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def assets(self) -> dict[str, Asset]:
        with self._lock:
            return {k: replace(v) for k, v in self._assets.items()}

    def get_asset(self, asset_id: str) -> Asset:
        with self._lock:
            return replace(self._require(asset_id))

    def _require(self, asset_id: str) -> Asset:
        try:
            return self._assets[asset_id]
        except KeyError:
            raise UnknownAsset(f"{asset_id} on {self.id}") from None

    def _append(self, op: LedgerOp, asset: Asset, session_id: str | None) -> LedgerRecord:
        record = LedgerRecord(
            seq=len(self._records) + 1,
            op=op.value,
            asset_id=asset.asset_id,
            session_id=session_id,
            amount=asset.amount,
            profile_id=asset.profile_id,
            owner=asset.owner,
            payload_hash=operation_hash(self.id, op.value, asset.asset_id, session_id,
                                        asset.amount, asset.profile_id, asset.owner),
            timestamp=self.clock.now,
            order=self.clock.next_order(),
        )
        self._records.append(record)
        if self.journal is not None:
            self.journal.parent.mkdir(parents=True, exist_ok=True)
            with open(self.journal, "ab") as fh:
                fh.write(encoding.dump_lines([{"network": self.id, **record.to_dict()}]))
                fh.flush()
                os.fsync(fh.fileno())
        return record

    def restore(self, records: Iterable[LedgerRecord]) -> None:
        """Rebuild the asset table and receipts from a record log.

        Receipts are re-signed; Ed25519 is deterministic so they come back
        byte-identical to the ones handed out before. ``lock_expiry`` is not
        in the record and comes back as None.
        """
        with self._lock:
            records = list(records)
            _, problems = replay_records(records)
            if problems:
                raise ValueError(f"{self.id}: journal does not replay: {problems[0]}")
            for r in records:
                if r.op == LedgerOp.ISSUE.value:
                    self._issued += 1
                if r.op in (LedgerOp.ISSUE.value, LedgerOp.MINT.value):
                    self._assets[r.asset_id] = Asset(r.asset_id, r.profile_id, r.amount, r.owner,
                                                     AssetStatus.FREE, self.id)
                    continue
                asset = self._assets[r.asset_id]
                asset.owner = r.owner
                asset.status = _LEGAL[r.op][1]
                asset.lock_session = r.session_id if asset.status is AssetStatus.LOCKED else None
            self._records.extend(records)
            for r in records:
                if r.session_id is not None:
                    receipt = self._receipt(r)
                    if r.op == LedgerOp.MINT.value:
                        self._mints[r.session_id] = receipt

    def _receipt(self, record: LedgerRecord) -> EvidenceReceipt:
        receipt = EvidenceReceipt(
            network=self.id,
            ledger_seq=record.seq,
            op=record.op,
            asset_id=record.asset_id,
            session_id=record.session_id or "",
            amount=record.amount,
            profile_id=record.profile_id,
            payload_hash=record.payload_hash,
            signer=self.notary.owner,
        ).signed(self.notary)
        self._receipts[(record.session_id or "", record.asset_id, record.op)] = receipt
        return receipt

    # -- operations ----------------------------------------------------

    def issue_asset(self, profile_id: str, owner: str, amount: int) -> Asset:
        if profile_id not in self.registry:
            raise UnknownProfile(profile_id)
        if amount <= 0:
            raise NonPositiveAmount(amount)
        with self._lock:
            self._issued += 1
            asset = Asset(
                asset_id=f"{self.id}:{self._issued:05d}",
                profile_id=profile_id,
                amount=amount,
                owner=owner,
                status=AssetStatus.FREE,
                origin_network=self.id,
            )
            self._assets[asset.asset_id] = asset
            self._append(LedgerOp.ISSUE, asset, None)
            return replace(asset)

    def lock_asset(self, asset_id: str, session_id: str, expiry: int) -> EvidenceReceipt:
        with self._lock:
            prior = self._receipts.get((session_id, asset_id, LedgerOp.LOCK.value))
            if prior is not None:
                return prior
            asset = self._require(asset_id)
            if asset.status is not AssetStatus.FREE:
                raise AssetNotFree(f"{asset_id} is {asset.status.value}")
            if expiry <= self.clock.now:
                raise ExpiredDeadline(f"expiry {expiry} not after now {self.clock.now}")
            asset.status = AssetStatus.LOCKED
            asset.lock_session = session_id
            asset.lock_expiry = expiry
            return self._receipt(self._append(LedgerOp.LOCK, asset, session_id))

    def _locked_by(self, asset_id: str, session_id: str) -> Asset:
        asset = self._require(asset_id)
        if asset.status is not AssetStatus.LOCKED or asset.lock_session != session_id:
            raise NotLockedBySession(f"{asset_id} is {asset.status.value}, not locked by {session_id}")
        return asset

    def unlock_asset(self, asset_id: str, session_id: str) -> EvidenceReceipt:
        with self._lock:
            prior = self._receipts.get((session_id, asset_id, LedgerOp.UNLOCK.value))
            if prior is not None:
                return prior
            asset = self._locked_by(asset_id, session_id)
            asset.status = AssetStatus.FREE
            asset.lock_session = None
            asset.lock_expiry = None
            return self._receipt(self._append(LedgerOp.UNLOCK, asset, session_id))

    def burn_asset(self, asset_id: str, session_id: str) -> EvidenceReceipt:
        with self._lock:
            prior = self._receipts.get((session_id, asset_id, LedgerOp.BURN.value))
            if prior is not None:
                return prior
            asset = self._locked_by(asset_id, session_id)
            asset.status = AssetStatus.BURNED
            asset.lock_session = None
            asset.lock_expiry = None
            return self._receipt(self._append(LedgerOp.BURN, asset, session_id))

    def mint_asset(
        self,
        profile_id: str,
        amount: int,
        beneficiary: str,
        session_id: str,
        origin_network: str,
        burn_evidence: EvidenceReceipt,
    ) -> EvidenceReceipt:
        with self._lock:
            prior = self._mints.get(session_id)
            if prior is not None:
                return prior
            verdict = verify_evidence(
                burn_evidence,
                {"op": LedgerOp.BURN.value, "session_id": session_id, "amount": amount,
                 "profile_id": profile_id, "network": origin_network},
                self.trusted_keys.public(getattr(burn_evidence, "signer", "")),
            )
            if not verdict:
                raise InvalidEvidence(f"{verdict.reason}: {verdict.detail}")
            if burn_evidence.signer != origin_network:
                raise InvalidEvidence(f"burn evidence signed by {burn_evidence.signer}, not {origin_network}")
            if profile_id not in self.registry:
                raise UnknownProfile(profile_id)
            asset = Asset(
                asset_id=f"{self.id}:m:{session_id}",
                profile_id=profile_id,
                amount=amount,
                owner=beneficiary,
                status=AssetStatus.FREE,
                origin_network=origin_network,
            )
            self._assets[asset.asset_id] = asset
            receipt = self._receipt(self._append(LedgerOp.MINT, asset, session_id))
            self._mints[session_id] = receipt
            return receipt

    def assign_asset(self, asset_id: str, new_owner: str) -> LedgerRecord:
        with self._lock:
            asset = self._require(asset_id)
            if asset.status is not AssetStatus.FREE:
                raise AssetNotFree(f"{asset_id} is {asset.status.value}")
            asset.owner = new_owner
            return self._append(LedgerOp.ASSIGN, asset, None)

    def query_asset_status(self, asset_id: str, requester: Any) -> dict[str, Any]:
        requester_id = getattr(requester, "gateway_id", requester)
        if self.network.visibility is Visibility.PRIVATE and requester_id not in self.readers:
            raise Unauthorized(f"{requester_id} may not read {self.id}")
        with self._lock:
            asset = self._require(asset_id)
            return {
                "status": asset.status.value,
                "amount": asset.amount,
                "profile_id": asset.profile_id,
                "lock_session": asset.lock_session,
            }

    def pre_flight_check(self, proposal: Any, attestations: Mapping[str, str]) -> ValidationReport:
        """Dry-run validation of a transfer proposal; never changes state.

        ``attestations`` maps party id to an identity verdict obtained from
        the identity provider (``UNAVAILABLE`` when it could not be reached).
        """
        with self._lock:
            asset = self._assets.get(proposal.asset_id)
            checks = [Check("asset-exists", asset is not None, () if asset else ("ASSET_NOT_FOUND",))]
            free = asset is not None and asset.status is AssetStatus.FREE
            checks.append(Check("asset-free", free, () if free else ("ASSET_NOT_FREE",)))
            amount_ok = asset is not None and proposal.amount > 0 and asset.amount == proposal.amount
            checks.append(Check("amount-matches", amount_ok, () if amount_ok else ("AMOUNT_MISMATCH",)))
            profile = self.registry.get(asset.profile_id) if asset and asset.profile_id in self.registry else None
            profile_ok = profile is not None and profile.canonical_hash == bytes(proposal.profile_hash)
            checks.append(Check("profile-known", profile_ok, () if profile_ok else ("PROFILE_UNKNOWN",)))
        travel = validate_travel_rule(proposal.travel_rule)
        checks.append(Check("travel-rule-complete", travel.passed, travel.codes))
        checks.append(identity_check(attestations))
        return ValidationReport(tuple(checks))

    # -- audit helpers ------------------------------------------------

    def export_log(self) -> bytes:
        return encoding.dump_lines(
            {"network": self.id, **r.to_dict()} for r in self.records
        )

    def supply(self) -> dict[str, int]:
        """Total FREE+LOCKED amount per profile, from the asset table."""
        totals: dict[str, int] = {}
        with self._lock:
            for a in self._assets.values():
                if a.status is not AssetStatus.BURNED:
                    totals[a.profile_id] = totals.get(a.profile_id, 0) + a.amount
        return totals


def identity_check(attestations: Mapping[str, str]) -> Check:
    codes = []
    for party, verdict in sorted(attestations.items()):
        if verdict == "UNAVAILABLE":
            codes.append("IDP_UNAVAILABLE")
        elif verdict != "VERIFIED":
            codes.append(f"IDENTITY_{verdict}")
    ok = not codes and bool(attestations)
    if not attestations:
        codes.append("IDENTITY_MISSING")
    return Check("identities-attested", ok, tuple(dict.fromkeys(codes)))


# -- log analysis (shared with the global invariant checker) -----------------

_LEGAL = {
    LedgerOp.LOCK.value: (AssetStatus.FREE, AssetStatus.LOCKED),
    LedgerOp.UNLOCK.value: (AssetStatus.LOCKED, AssetStatus.FREE),
    LedgerOp.BURN.value: (AssetStatus.LOCKED, AssetStatus.BURNED),
    LedgerOp.ASSIGN.value: (AssetStatus.FREE, AssetStatus.FREE),
}


@dataclass
class ReplayedAsset:
    profile_id: str
    amount: int
    status: AssetStatus
    lock_session: str | None = None


def replay_records(records: Iterable[LedgerRecord]) -> tuple[dict[str, ReplayedAsset], list[str]]:
    """Rebuild asset states from a record log, collecting illegal transitions."""
    assets: dict[str, ReplayedAsset] = {}
    problems: list[str] = []
    expected_seq = 1
    for r in records:
        if r.seq != expected_seq:
            problems.append(f"seq {r.seq} where {expected_seq} expected")
        expected_seq = r.seq + 1
        if r.op in (LedgerOp.ISSUE.value, LedgerOp.MINT.value):
            if r.asset_id in assets:
                problems.append(f"{r.op} of existing asset {r.asset_id}")
            if r.amount <= 0:
                problems.append(f"{r.op} of non-positive amount {r.asset_id}")
            assets[r.asset_id] = ReplayedAsset(r.profile_id, r.amount, AssetStatus.FREE)
            continue
        asset = assets.get(r.asset_id)
        if asset is None:
            problems.append(f"{r.op} of unknown asset {r.asset_id}")
            continue
        before, after = _LEGAL[r.op]
        if asset.status is not before:
            problems.append(f"{r.op} on {r.asset_id} in status {asset.status.value}")
        elif r.op in (LedgerOp.UNLOCK.value, LedgerOp.BURN.value) and asset.lock_session != r.session_id:
            problems.append(f"{r.op} on {r.asset_id} by {r.session_id}, locked by {asset.lock_session}")
        asset.status = after
        asset.lock_session = r.session_id if after is AssetStatus.LOCKED else None
    return assets, problems


def conservation_problems(ledger: Ledger) -> list[str]:
    """Per-network conservation: supply changes only through issue, mint and burn."""
    replayed, problems = replay_records(ledger.records)
    delta: dict[str, int] = {}
    for r in ledger.records:
        sign = {"ISSUE": 1, "MINT": 1, "BURN": -1}.get(r.op, 0)
        delta[r.profile_id] = delta.get(r.profile_id, 0) + sign * r.amount
    from_replay: dict[str, int] = {}
    for a in replayed.values():
        if a.status is not AssetStatus.BURNED:
            from_replay[a.profile_id] = from_replay.get(a.profile_id, 0) + a.amount
    actual = ledger.supply()
    for profile in set(delta) | set(actual) | set(from_replay):
        d, s, f = delta.get(profile, 0), actual.get(profile, 0), from_replay.get(profile, 0)
        if not d == s == f:
            problems.append(f"{ledger.id}/{profile}: log delta {d}, replay {f}, table {s}")
    return problems


class AssetNetworks(dict):
    """Ledgers by network id; lookups of unknown ids raise ``UnknownNetwork``."""

    def __missing__(self, key):
        raise UnknownNetwork(key)
