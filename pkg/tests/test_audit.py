import importlib.util
import random
from pathlib import Path

import pytest

from satp_gateway import encoding
from satp_gateway.crypto import KeyPair
from satp_gateway.harness.audit import (
    CHAIN_BREAK,
    ILLEGAL_TRANSITION,
    LEDGER_MISMATCH,
    MALFORMED,
    SIGNATURE_INVALID,
    audit_verify,
    bundle_records,
    reseal,
)
from satp_gateway.protocol import MsgType, SatpMessage

from conftest import FIXTURES

G1 = KeyPair.from_seed("G1", "gateway-G1")
BUNDLES = ["completed.bundle", "rejected.bundle", "empty.bundle"]


def _load(name):
    return (FIXTURES / name).read_bytes()


def _rebuild(records, key=G1):
    """Encode edited records (ending with the old seal) and re-seal them as
    a dishonest exporter would."""
    assert records[-1]["type"] == "seal"
    return reseal(encoding.dump_lines(records), key)


def test_fixtures_are_current():
    spec = importlib.util.spec_from_file_location(
        "make_fixtures", Path(__file__).parents[1] / "scripts" / "make_fixtures.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    for name, data in mod.fixtures().items():
        assert data == _load(name), f"{name} is stale; run scripts/make_fixtures.py"


@pytest.mark.parametrize("name,sessions", [("completed.bundle", 1), ("rejected.bundle", 1), ("empty.bundle", 0)])
def test_fixtures_verify(name, sessions, fixture_keys):
    result = audit_verify(_load(name), fixture_keys)
    assert result.ok and result.sessions == sessions, str(result)


@pytest.mark.parametrize("name", BUNDLES)
def test_sampled_byte_flips_rejected(name, fixture_keys):
    # the acceptance suite flips every byte; this is the quick version
    data = _load(name)
    rng = random.Random(name)
    for pos in rng.sample(range(len(data)), min(300, len(data))):
        mutated = bytearray(data)
        mutated[pos] ^= 1 << rng.randrange(8)
        assert not audit_verify(bytes(mutated), fixture_keys).ok, pos


def test_truncation_and_unknown_signer(fixture_keys):
    data = _load("completed.bundle")
    assert audit_verify(data[:-1], fixture_keys).reason == MALFORMED
    assert audit_verify(data[: len(data) // 2], fixture_keys).reason == MALFORMED
    assert audit_verify(b"", fixture_keys).reason == MALFORMED
    assert audit_verify(data, {}).reason == SIGNATURE_INVALID
    stranger = KeyPair.from_seed("G1", "not-the-real-key")
    assert audit_verify(reseal(data, stranger), fixture_keys).reason == SIGNATURE_INVALID


def test_reseal_without_edits_verifies(fixture_keys):
    data = _load("completed.bundle")
    assert _rebuild(bundle_records(data)) == data


def test_resealed_but_dropped_message(fixture_keys):
    records = bundle_records(_load("completed.bundle"))
    first_msg = next(i for i, r in enumerate(records) if r["type"] == "message")
    del records[first_msg + 2]
    result = audit_verify(_rebuild(records), fixture_keys)
    assert result.reason == CHAIN_BREAK, str(result)


def test_resealed_but_edited_ledger(fixture_keys):
    records = bundle_records(_load("completed.bundle"))
    rec = next(r for r in records if r["type"] == "ledger")
    rec["record"]["amount"] = 1
    result = audit_verify(_rebuild(records), fixture_keys)
    assert result.reason == LEDGER_MISMATCH, str(result)


def test_resealed_but_forged_message(fixture_keys):
    records = bundle_records(_load("completed.bundle"))
    i = next(i for i, r in enumerate(records) if r["type"] == "message")
    msg = SatpMessage.decode(records[i]["message"])
    records[i]["message"] = SatpMessage(msg.msg_type, msg.session_id, msg.seq, msg.prev_hash,
                                        {**msg.payload, "extra": 1}, msg.sender, msg.signature).encoded
    result = audit_verify(_rebuild(records), fixture_keys)
    assert result.reason == SIGNATURE_INVALID, str(result)


def test_resealed_illegal_transition(fixture_keys):
    """A gateway signs a well-formed chain that skips the lock phase."""
    records = bundle_records(_load("completed.bundle"))
    header = records[0]
    proposal = next(SatpMessage.decode(r["message"]) for r in records if r["type"] == "message")
    done = SatpMessage.create(MsgType.TRANSFER_COMPLETE, proposal.session_id, 2, proposal.hash, {}, G1)
    sid = proposal.session_id
    forged = [header, {"type": "session", "session_id": sid, "role": "ORIGIN"}]
    forged += [{"type": "message", "session_id": sid, "role": "ORIGIN", "message": m.encoded}
               for m in (proposal, done)]
    forged.append(records[-1])
    result = audit_verify(_rebuild(forged), fixture_keys)
    assert result.reason == ILLEGAL_TRANSITION, str(result)
