from dataclasses import replace

import pytest

from satp_gateway.assets import ProfileRegistry, TravelRulePayload
from satp_gateway.clock import LogicalClock
from satp_gateway.crypto import ZERO_HASH, KeyPair, KeyRing
from satp_gateway.harness.scenario import DEFAULT_PROFILE
from satp_gateway.ledger import Ledger, NetworkId
from satp_gateway.protocol import (
    BadSequence,
    ChainBreak,
    InvalidSignature,
    MsgType,
    Phase,
    Role,
    SatpMessage,
    SessionState,
    StepContext,
    TransferProposal,
    Trigger,
    TriggerKind,
    UnexpectedMessage,
    legal_successors,
    new_destination_session,
    new_origin_session,
    step,
    verify_chain,
)

G1, G2 = KeyPair.from_seed("G1", "gateway-G1"), KeyPair.from_seed("G2", "gateway-G2")
N1, N2 = KeyPair.from_seed("N1", "network-N1"), KeyPair.from_seed("N2", "network-N2")
KEYS = KeyRing({k.owner: k.public for k in (G1, G2, N1, N2)})
PROFILES = {DEFAULT_PROFILE.canonical_hash: DEFAULT_PROFILE.profile_id}
TRAVEL = TravelRulePayload("Alice", "acct-alice", "LEI-1", "Bob", "acct-bob")


def ctx(key, served, attest=lambda p: "VERIFIED"):
    return StepContext(key, KEYS, PROFILES, frozenset(served), attest)


ORIGIN, DEST = ctx(G1, {"N1"}), ctx(G2, {"N2"})


def proposal(**kw):
    fields = dict(session_id="G1/tx1", origin_gateway="G1", destination_gateway="G2", origin_network="N1",
                  destination_network="N2", asset_id="N1:00001", profile_hash=DEFAULT_PROFILE.canonical_hash,
                  amount=100, beneficiary="acct-bob", travel_rule=TRAVEL, lock_expiry=200,
                  proposal_nonce=b"n" * 16)
    fields.update(kw)
    return TransferProposal(**fields)


class Pair:
    """Both parties plus their ledgers, driven step by step."""

    def __init__(self, dest_ctx=DEST, **kw):
        clock = LogicalClock()
        reg = ProfileRegistry([DEFAULT_PROFILE])
        trusted = {"N1": N1.public, "N2": N2.public}
        self.ledgers = {"N1": Ledger(NetworkId("N1"), reg, N1, trusted, clock=clock),
                        "N2": Ledger(NetworkId("N2"), reg, N2, trusted, clock=clock)}
        self.ledgers["N1"].issue_asset(DEFAULT_PROFILE.profile_id, "acct-alice", 100)
        self.dest_ctx = dest_ctx
        res = step(new_origin_session(proposal(**kw)), Trigger(TriggerKind.START), ORIGIN)
        self.origin, self.outbox = res.state, list(res.messages)
        self.dest = new_destination_session(res.messages[0])

    def run_command(self, role, cmd):
        ledger = self.ledgers[cmd.network]
        if cmd.op == "LOCK":
            r, kind = ledger.lock_asset(cmd.asset_id, cmd.session_id, cmd.expiry), TriggerKind.LOCK_DONE
        elif cmd.op == "BURN":
            r, kind = ledger.burn_asset(cmd.asset_id, cmd.session_id), TriggerKind.BURN_DONE
        elif cmd.op == "UNLOCK":
            r, kind = ledger.unlock_asset(cmd.asset_id, cmd.session_id), TriggerKind.UNLOCK_DONE
        else:
            r = ledger.mint_asset(cmd.profile_id, cmd.amount, cmd.beneficiary, cmd.session_id,
                                  cmd.origin_network, cmd.burn_evidence)
            kind = TriggerKind.MINT_DONE
        self.apply(role, Trigger(kind, receipt=r))

    def apply(self, role, event):
        if role is Role.ORIGIN:
            res = step(self.origin, event, ORIGIN)
            self.origin = res.state
        else:
            res = step(self.dest, event, self.dest_ctx)
            self.dest = res.state
        self.outbox += res.messages
        for cmd in res.commands:
            self.run_command(role, cmd)

    def deliver_all(self, until=None):
        while self.outbox:
            msg = self.outbox.pop(0)
            if until and msg.msg_type is until:
                self.outbox.insert(0, msg)
                return
            self.apply(Role.DESTINATION if msg.sender == "G1" else Role.ORIGIN, msg)


def test_happy_exchange():
    p = Pair()
    p.deliver_all()
    assert p.origin.phase is Phase.COMPLETED and p.dest.phase is Phase.COMPLETED
    assert p.origin.chain == p.dest.chain
    assert [m.msg_type.value for m in p.origin.chain] == [
        "PROPOSAL", "PROPOSAL_RECEIPT", "LOCK_ASSERTION", "LOCK_RECEIPT", "COMMIT_PREPARE",
        "COMMIT_READY", "COMMIT_FINAL", "ACK_COMMIT_FINAL", "TRANSFER_COMPLETE"]
    assert verify_chain(p.origin.chain, KEYS)
    assert [r.op for r in p.ledgers["N1"].records] == ["ISSUE", "LOCK", "BURN"]
    assert [r.op for r in p.ledgers["N2"].records] == ["MINT"]
    prev = None
    for m in p.origin.chain:
        assert m.msg_type in legal_successors(prev)
        prev = m


def test_commit_point_set_by_commit_ready():
    p = Pair()
    p.deliver_all(until=MsgType.COMMIT_READY)
    assert p.origin.phase is Phase.LOCK_VERIFIED and not p.origin.commit_point_passed
    assert step(p.origin, Trigger(TriggerKind.TIMEOUT), ORIGIN).state.phase is Phase.ROLLBACK_PENDING
    p.apply(Role.ORIGIN, p.outbox.pop(0))
    assert p.origin.commit_point_passed
    with pytest.raises(UnexpectedMessage):
        step(p.origin, Trigger(TriggerKind.TIMEOUT), ORIGIN)


@pytest.mark.parametrize("change,code", [
    (dict(destination_network="N9"), "NETWORK_NOT_SERVED"),
    (dict(travel_rule=replace(TRAVEL, beneficiary_name="")), "MISSING_BENEFICIARY_NAME"),
    (dict(profile_hash=ZERO_HASH), "PROFILE_UNKNOWN"),
    (dict(destination_network="N1"), "SAME_NETWORK"),
])
def test_destination_rejects(change, code):
    p = Pair(**change)
    p.deliver_all()
    assert p.dest.phase is Phase.REJECTED and code in p.dest.reasons
    assert p.origin.phase is Phase.ROLLED_BACK
    assert [r.op for r in p.ledgers["N1"].records] == ["ISSUE"]


def test_destination_checks_identity_independently():
    p = Pair(dest_ctx=ctx(G2, {"N2"}, attest=lambda party: "BLOCKED" if party == "acct-bob" else "VERIFIED"))
    p.deliver_all()
    assert p.dest.phase is Phase.REJECTED and "IDENTITY_BLOCKED" in p.dest.reasons


def test_chain_violations():
    p = Pair()
    msg = p.outbox[0]
    forged = replace(msg, signature=bytes(64))
    with pytest.raises(InvalidSignature):
        step(p.dest, forged, DEST)
    wrong_seq = SatpMessage.create(MsgType.PROPOSAL, msg.session_id, 2, ZERO_HASH, msg.payload, G1)
    with pytest.raises(BadSequence):
        step(p.dest, wrong_seq, DEST)
    wrong_prev = SatpMessage.create(MsgType.PROPOSAL, msg.session_id, 1, b"\x01" * 32, msg.payload, G1)
    with pytest.raises(ChainBreak):
        step(p.dest, wrong_prev, DEST)
    impostor = SatpMessage.create(MsgType.PROPOSAL, msg.session_id, 1, ZERO_HASH, msg.payload, G2)
    with pytest.raises(UnexpectedMessage):
        step(p.dest, impostor, DEST)


def test_duplicate_is_rejected_without_change():
    p = Pair()
    first = p.outbox[0]
    p.deliver_all(until=MsgType.LOCK_ASSERTION)
    before = p.dest
    with pytest.raises(UnexpectedMessage):
        step(p.dest, first, DEST)
    assert p.dest is before


def test_rollback_notice_forks_unacked_reply():
    """The origin times out after LOCK_ASSERTION while the LOCK_RECEIPT is in
    flight: its notice takes the receipt's sequence number."""
    p = Pair()
    p.deliver_all(until=MsgType.LOCK_RECEIPT)
    receipt = p.outbox.pop(0)
    assert p.dest.phase is Phase.LOCK_VERIFIED and p.dest.chain[-1] == receipt
    timed_out = step(p.origin, Trigger(TriggerKind.TIMEOUT), ORIGIN)
    notice = timed_out.messages[0]
    assert notice.seq == receipt.seq
    res = step(p.dest, notice, DEST)
    assert res.state.phase is Phase.ROLLED_BACK
    assert res.state.chain[-2] == notice and res.messages[0].msg_type is MsgType.ROLLBACK_ACK
    assert verify_chain(res.state.chain, KEYS)


def test_fork_not_allowed_after_commit():
    p = Pair()
    p.deliver_all(until=MsgType.ACK_COMMIT_FINAL)
    assert p.dest.phase is Phase.COMMITTED_DESTINATION and p.dest.chain[-1].msg_type is MsgType.ACK_COMMIT_FINAL
    n = len(p.dest.chain)
    fake = SatpMessage.create(MsgType.ROLLBACK_NOTICE, p.dest.session_id, n, p.dest.chain[-2].hash,
                              {"reason": "x"}, G1)
    with pytest.raises((UnexpectedMessage, ChainBreak)):
        step(p.dest, fake, DEST)


def test_session_state_roundtrip():
    p = Pair()
    p.deliver_all()
    for s in (p.origin, p.dest):
        assert SessionState.decode(s.encode()) == s


def test_start_only_once():
    p = Pair()
    with pytest.raises(UnexpectedMessage):
        step(p.origin, Trigger(TriggerKind.START), ORIGIN)
