import json
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from satp_gateway.assets import (
    TRAVEL_RULE_CODES,
    AssetProfile,
    ProfileConflict,
    ProfileRegistry,
    TravelRulePayload,
    UnknownProfile,
    decode_profile,
    encode_profile,
    validate_travel_rule,
)
from satp_gateway.harness.scenario import DEFAULT_PROFILE

FIELDS = list(TRAVEL_RULE_CODES)
FULL = TravelRulePayload("Alice", "acct-alice", "LEI-1", "Bob", "acct-bob")


def test_profile_hash_vector():
    assert DEFAULT_PROFILE.canonical_hash.hex() == (
        "a47ca8595edad7c49f313649890ee1fb16f03f956327450d4d74da1d2e07ee9e")


def test_profile_encoding_roundtrip():
    assert decode_profile(encode_profile(DEFAULT_PROFILE)) == DEFAULT_PROFILE


@pytest.mark.parametrize("field,value", [
    ("asset_class", "other"), ("schema_version", "1.1"), ("base_unit", "cent"),
    ("divisibility", 2), ("issuer_id", "issuer-2"), ("jurisdiction", None),
])
def test_every_field_changes_hash(field, value):
    assert replace(DEFAULT_PROFILE, **{field: value}).canonical_hash != DEFAULT_PROFILE.canonical_hash


def test_profile_json_rejects_wrong_hash():
    data = DEFAULT_PROFILE.to_json()
    assert AssetProfile.from_json(data) == DEFAULT_PROFILE
    data["issuer_id"] = "someone-else"
    with pytest.raises(ProfileConflict):
        AssetProfile.from_json(data)


def test_profile_validation():
    with pytest.raises(ValueError):
        AssetProfile("", "c", "1", "u", 0, "i")
    with pytest.raises(ValueError):
        AssetProfile("p", "c", "1", "u", -1, "i")
    with pytest.raises(TypeError):
        AssetProfile("p", "c", "1", "u", 1.5, "i")


def test_registry_conflict_and_lookup(tmp_path):
    reg = ProfileRegistry([DEFAULT_PROFILE])
    reg.register(DEFAULT_PROFILE)  # same content is fine
    with pytest.raises(ProfileConflict):
        reg.register(replace(DEFAULT_PROFILE, issuer_id="x"))
    with pytest.raises(UnknownProfile):
        reg.get("nope")
    assert reg.by_hash(DEFAULT_PROFILE.canonical_hash) == DEFAULT_PROFILE
    reg.export_dir(tmp_path)
    other = ProfileRegistry()
    assert other.import_dir(tmp_path) == [DEFAULT_PROFILE.profile_id]
    assert json.loads((tmp_path / "bond-2030.json").read_text())["canonical_hash"] == \
        DEFAULT_PROFILE.canonical_hash.hex()


def test_complete_payload_passes():
    report = validate_travel_rule(FULL)
    assert report.passed and report.codes == ()


@given(st.sets(st.sampled_from(FIELDS)), st.sampled_from(["", "   ", "\t"]))
def test_codes_are_exactly_the_missing_fields(missing, blank):
    payload = replace(FULL, **{f: blank for f in missing})
    report = validate_travel_rule(payload)
    assert set(report.codes) == {TRAVEL_RULE_CODES[f] for f in missing}
    assert report.passed == (not missing)


def test_report_dict_roundtrip():
    report = validate_travel_rule(replace(FULL, beneficiary_name=""))
    from satp_gateway.assets import ValidationReport
    assert ValidationReport.from_dict(report.to_dict()) == report
