"""Asset profiles, the profile registry, and Travel Rule payload validation."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from . import encoding
from .crypto import digest

PROFILE_DOMAIN = "satp.asset-profile.v1"


class ProfileConflict(Exception):
    pass


class UnknownProfile(KeyError):
    pass


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    codes: tuple[str, ...] = ()


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(code for c in self.checks if not c.passed for code in c.codes)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "codes": list(c.codes)}
                for c in self.checks
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ValidationReport":
        return cls(tuple(Check(c["name"], c["passed"], tuple(c["codes"])) for c in data["checks"]))


@dataclass(frozen=True)
class AssetProfile:
    """Machine-readable description of a tokenizable asset class.

    ``canonical_hash`` is derived, never supplied: two parties holding the
    same field content always compute the same value.
    """

    profile_id: str
    asset_class: str
    schema_version: str
    base_unit: str
    divisibility: int
    issuer_id: str
    jurisdiction: str | None = None

    def __post_init__(self):
        if not self.profile_id:
            raise ValueError("profile_id must be non-empty")
        if isinstance(self.divisibility, bool) or not isinstance(self.divisibility, int):
            raise TypeError("divisibility must be an integer")
        if self.divisibility < 0:
            raise ValueError("divisibility must be >= 0")

    @property
    def canonical_hash(self) -> bytes:
        return canonical_profile_hash(self)

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        data["canonical_hash"] = self.canonical_hash.hex()
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "AssetProfile":
        names = {f.name for f in fields(cls)}
        profile = cls(**{k: v for k, v in data.items() if k in names})
        claimed = data.get("canonical_hash")
        if claimed is not None and bytes.fromhex(claimed) != profile.canonical_hash:
            raise ProfileConflict(f"{profile.profile_id}: canonical_hash does not match content")
        return profile


_PROFILE_ORDER = (
    "profile_id",
    "asset_class",
    "schema_version",
    "base_unit",
    "divisibility",
    "issuer_id",
    "jurisdiction",
)


def encode_profile(profile: AssetProfile) -> bytes:
    """Fixed-order canonical encoding: a list led by the domain tag."""
    return encoding.encode([PROFILE_DOMAIN] + [getattr(profile, n) for n in _PROFILE_ORDER])


def decode_profile(data: bytes) -> AssetProfile:
    items = encoding.decode(data)
    if not isinstance(items, list) or len(items) != len(_PROFILE_ORDER) + 1 or items[0] != PROFILE_DOMAIN:
        raise encoding.DecodeError("not an asset profile encoding")
    return AssetProfile(**dict(zip(_PROFILE_ORDER, items[1:])))


def canonical_profile_hash(profile: AssetProfile) -> bytes:
    return digest(encode_profile(profile))


class ProfileRegistry:
    """Profiles by id, with a reverse index by canonical hash."""

    def __init__(self, profiles=()):
        self._by_id: dict[str, AssetProfile] = {}
        self._by_hash: dict[bytes, AssetProfile] = {}
        self._lock = threading.Lock()
        for p in profiles:
            self.register(p)

    def register(self, profile: AssetProfile) -> str:
        h = profile.canonical_hash
        with self._lock:
            existing = self._by_id.get(profile.profile_id)
            if existing is not None:
                if existing.canonical_hash != h:
                    raise ProfileConflict(
                        f"profile {profile.profile_id!r} already registered with different content"
                    )
                return profile.profile_id
            self._by_id[profile.profile_id] = profile
            self._by_hash[h] = profile
        return profile.profile_id

    def get(self, profile_id: str) -> AssetProfile:
        try:
            return self._by_id[profile_id]
        except KeyError:
            raise UnknownProfile(profile_id) from None

    def by_hash(self, profile_hash: bytes) -> AssetProfile | None:
        return self._by_hash.get(bytes(profile_hash))

    def __contains__(self, profile_id: str) -> bool:
        return profile_id in self._by_id

    def __iter__(self):
        return iter(sorted(self._by_id.values(), key=lambda p: p.profile_id))

    def __len__(self) -> int:
        return len(self._by_id)

    def known_hashes(self) -> frozenset[bytes]:
        return frozenset(self._by_hash)

    # one JSON document per profile
    def export_dir(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for p in self:
            path = directory / f"{p.profile_id}.json"
            path.write_text(json.dumps(p.to_json(), indent=2, sort_keys=True) + "\n")
            written.append(path)
        return written

    def import_dir(self, directory: str | Path) -> list[str]:
        return [self.register(load_profile(path)) for path in sorted(Path(directory).glob("*.json"))]


def load_profile(path: str | Path) -> AssetProfile:
    return AssetProfile.from_json(json.loads(Path(path).read_text()))


# -- Travel Rule ------------------------------------------------------------

@dataclass(frozen=True)
class TravelRulePayload:
    originator_name: str = ""
    originator_account: str = ""
    originator_address_or_id: str = ""
    beneficiary_name: str = ""
    beneficiary_account: str = ""

    def to_dict(self) -> dict[str, str]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TravelRulePayload":
        return cls(**{f.name: data.get(f.name) or "" for f in fields(cls)})


TRAVEL_RULE_CODES = {
    "originator_name": "MISSING_ORIGINATOR_NAME",
    "originator_account": "MISSING_ORIGINATOR_ACCOUNT",
    "originator_address_or_id": "MISSING_ORIGINATOR_ADDRESS_OR_ID",
    "beneficiary_name": "MISSING_BENEFICIARY_NAME",
    "beneficiary_account": "MISSING_BENEFICIARY_ACCOUNT",
}


def validate_travel_rule(payload: TravelRulePayload) -> ValidationReport:
    # whitespace-only counts as missing
    checks = []
    for name, code in TRAVEL_RULE_CODES.items():
        value = getattr(payload, name)
        present = isinstance(value, str) and value.strip() != ""
        checks.append(Check(name, present, () if present else (code,)))
    return ValidationReport(tuple(checks))
