from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from satp_gateway.assets import ProfileRegistry, UnknownProfile
from satp_gateway.clock import LogicalClock
from satp_gateway.crypto import KeyPair
from satp_gateway.ledger import (
    AssetNotFree,
    AssetStatus,
    ExpiredDeadline,
    InvalidEvidence,
    Ledger,
    LedgerError,
    NetworkId,
    NonPositiveAmount,
    NotLockedBySession,
    Unauthorized,
    UnknownAsset,
    Visibility,
    conservation_problems,
    replay_records,
)
from satp_gateway.harness.scenario import DEFAULT_PROFILE

PID = DEFAULT_PROFILE.profile_id


def _pair(tmp_path=None):
    clock = LogicalClock()
    reg = ProfileRegistry([DEFAULT_PROFILE])
    k1, k2 = KeyPair.from_seed("N1", "network-N1"), KeyPair.from_seed("N2", "network-N2")
    trusted = {"N1": k1.public, "N2": k2.public}
    journal = (tmp_path / "N1.ledger") if tmp_path else None
    n1 = Ledger(NetworkId("N1"), reg, k1, trusted, readers=["G1"], clock=clock, journal=journal)
    n2 = Ledger(NetworkId("N2"), reg, k2, trusted, clock=clock)
    return n1, n2, clock


def test_lock_burn_mint_lifecycle():
    n1, n2, _ = _pair()
    a = n1.issue_asset(PID, "acct-alice", 100)
    lock = n1.lock_asset(a.asset_id, "s1", expiry=10)
    assert lock.op == "LOCK" and n1.get_asset(a.asset_id).status is AssetStatus.LOCKED
    burn = n1.burn_asset(a.asset_id, "s1")
    mint = n2.mint_asset(PID, 100, "acct-bob", "s1", "N1", burn)
    assert [r.op for r in n1.records] == ["ISSUE", "LOCK", "BURN"]
    assert [r.op for r in n2.records] == ["MINT"]
    assert mint.amount == 100 and n2.get_asset(f"N2:m:s1").owner == "acct-bob"
    assert not conservation_problems(n1) and not conservation_problems(n2)


def test_commands_are_idempotent():
    n1, n2, _ = _pair()
    a = n1.issue_asset(PID, "acct-alice", 100)
    assert n1.lock_asset(a.asset_id, "s1", 10) == n1.lock_asset(a.asset_id, "s1", 10)
    burn = n1.burn_asset(a.asset_id, "s1")
    assert n1.burn_asset(a.asset_id, "s1") == burn
    assert n2.mint_asset(PID, 100, "b", "s1", "N1", burn) == n2.mint_asset(PID, 100, "b", "s1", "N1", burn)
    assert len(n1.records) == 3 and len(n2.records) == 1


def test_illegal_operations():
    n1, _, clock = _pair()
    a = n1.issue_asset(PID, "acct-alice", 100)
    with pytest.raises(UnknownAsset):
        n1.lock_asset("nope", "s1", 10)
    with pytest.raises(NotLockedBySession):
        n1.burn_asset(a.asset_id, "s1")
    n1.lock_asset(a.asset_id, "s1", 10)
    with pytest.raises(AssetNotFree):
        n1.lock_asset(a.asset_id, "s2", 10)
    with pytest.raises(NotLockedBySession):
        n1.unlock_asset(a.asset_id, "s2")
    with pytest.raises(NonPositiveAmount):
        n1.issue_asset(PID, "x", 0)
    with pytest.raises(UnknownProfile):
        n1.issue_asset("nope", "x", 1)
    b = n1.issue_asset(PID, "x", 5)
    clock.advance_to(20)
    with pytest.raises(ExpiredDeadline):
        n1.lock_asset(b.asset_id, "s3", 20)


def test_mint_requires_valid_burn_evidence():
    n1, n2, _ = _pair()
    a = n1.issue_asset(PID, "acct-alice", 100)
    lock = n1.lock_asset(a.asset_id, "s1", 10)
    with pytest.raises(InvalidEvidence):
        n2.mint_asset(PID, 100, "b", "s1", "N1", lock)  # a lock is not a burn
    burn = n1.burn_asset(a.asset_id, "s1")
    with pytest.raises(InvalidEvidence):
        n2.mint_asset(PID, 99, "b", "s1", "N1", burn)
    with pytest.raises(InvalidEvidence):
        n2.mint_asset(PID, 100, "b", "s1", "N1", replace(burn, amount=1))
    forged = replace(burn, signer="N2").signed(KeyPair.from_seed("N2", "network-N2"))
    with pytest.raises(InvalidEvidence):
        n2.mint_asset(PID, 100, "b", "s1", "N1", forged)
    assert n2.records == ()


def test_private_visibility():
    n1, n2, _ = _pair()
    a = n1.issue_asset(PID, "acct-alice", 100)
    assert n1.query_asset_status(a.asset_id, "G1")["status"] == "FREE"
    with pytest.raises(Unauthorized):
        n1.query_asset_status(a.asset_id, "G2")
    public = Ledger(NetworkId("P", Visibility.PUBLIC), ProfileRegistry([DEFAULT_PROFILE]),
                    KeyPair.from_seed("P", "p"))
    b = public.issue_asset(PID, "x", 1)
    assert public.query_asset_status(b.asset_id, "anyone")["amount"] == 1


def test_journal_restore(tmp_path):
    n1, _, _ = _pair(tmp_path)
    a = n1.issue_asset(PID, "acct-alice", 100)
    lock = n1.lock_asset(a.asset_id, "s1", 10)
    n1.issue_asset(PID, "acct-carol", 7)
    again, _, _ = _pair(tmp_path)
    assert again.records == n1.records
    assert {k: replace(v, lock_expiry=None) for k, v in n1.assets().items()} == again.assets()
    assert again.lock_asset(a.asset_id, "s1", 10) == lock  # receipts re-signed identically
    assert again.issue_asset(PID, "x", 1).asset_id == "N1:00003"


def test_journal_torn_tail_ignored(tmp_path):
    n1, _, _ = _pair(tmp_path)
    n1.issue_asset(PID, "acct-alice", 100)
    with open(tmp_path / "N1.ledger", "ab") as fh:
        fh.write(b"BwAAAA")
    again, _, _ = _pair(tmp_path)
    assert len(again.records) == 1


ops = st.lists(st.tuples(st.sampled_from(["issue", "lock", "unlock", "burn", "assign"]),
                         st.integers(0, 4), st.integers(0, 2)), max_size=40)


@given(ops)
def test_random_operations_conserve(seq):
    """Whatever sequence of commands is attempted, rejected ones leave no
    trace and the log, its replay and the asset table agree."""
    n1, _, _ = _pair()
    ids: list[str] = []
    for op, i, s in seq:
        sid = f"s{s}"
        try:
            if op == "issue":
                ids.append(n1.issue_asset(PID, "o", 10 + i).asset_id)
            elif not ids:
                continue
            elif op == "lock":
                n1.lock_asset(ids[i % len(ids)], sid, 100)
            elif op == "unlock":
                n1.unlock_asset(ids[i % len(ids)], sid)
            elif op == "burn":
                n1.burn_asset(ids[i % len(ids)], sid)
            else:
                n1.assign_asset(ids[i % len(ids)], f"o{s}")
        except LedgerError:
            pass
    assert conservation_problems(n1) == []
    replayed, problems = replay_records(n1.records)
    assert problems == []
    assert {k: v.status for k, v in replayed.items()} == {k: v.status for k, v in n1.assets().items()}
