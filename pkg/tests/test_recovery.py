from dataclasses import replace

import pytest

from satp_gateway.clock import LogicalClock
from satp_gateway.crypto import ZERO_HASH, KeyPair
from satp_gateway.protocol import MsgType, Phase, Role, Trigger, TriggerKind, make_control, verify_chain
from satp_gateway.recovery import (
    CommitPointPassed,
    FileWalStore,
    OutOfOrderSeq,
    WalKind,
    WriteAheadLog,
    first_break,
    handle_recovery_request,
    recover,
    recovery_request,
    rollback,
    verify_wal,
)

from test_protocol import G1, G2, KEYS, ORIGIN, Pair


def test_wal_chain_and_tamper(happy_trace):
    entries = happy_trace.wals["G1"]
    assert verify_wal(entries) and entries[0].prev_hash == ZERO_HASH
    for i in (0, len(entries) // 2, len(entries) - 1):
        bad = list(entries)
        bad[i] = replace(bad[i], snapshot=bad[i].snapshot + b"x")
        assert first_break(bad) == i
    dropped = list(entries[:3]) + list(entries[4:])
    assert first_break(dropped) == 3


def test_append_wal_rejects_out_of_order():
    wal = WriteAheadLog(clock=LogicalClock())
    e = wal.build("s", Role.ORIGIN, WalKind.INTENT, b"\x00")
    wal.append_wal(e)
    with pytest.raises(OutOfOrderSeq):
        wal.append_wal(e)


def test_file_store_survives_torn_write(tmp_path):
    path = tmp_path / "g.wal"
    wal = WriteAheadLog(FileWalStore(path), LogicalClock())
    for i in range(3):
        wal.append("s", Role.ORIGIN, WalKind.INTENT, bytes([i]))
    with open(path, "ab") as fh:
        fh.write(b"BwAAAAIEAAAA")
    again = WriteAheadLog(FileWalStore(path), LogicalClock())
    assert again.entries == wal.entries and verify_wal(again.entries)


def test_recover_reproduces_final_sessions(happy_trace):
    for gid in ("G1", "G2"):
        gw = happy_trace.gateway_objects[gid]
        state, _ = recover(happy_trace.wals[gid])
        assert state.sessions == gw.sessions
        assert not state.pending_intents


def test_recover_every_prefix(happy_trace):
    """A crash may cut the log anywhere; every prefix recovers to verified
    chains and monotone phases."""
    for gid in ("G1", "G2"):
        entries = happy_trace.wals[gid]
        for n in range(len(entries) + 1):
            state, requests = recover(entries[:n])
            for s in state.sessions.values():
                assert verify_chain(s.chain, KEYS)
            for r in requests:
                assert r.msg_type is MsgType.RECOVERY_REQUEST


def test_rollback_guard():
    p = Pair()
    p.deliver_all(until=MsgType.COMMIT_READY)
    res = rollback(p.origin, ORIGIN)
    assert res.state.phase is Phase.ROLLED_BACK
    assert [c.op for c in res.commands] == ["UNLOCK"]
    assert res.messages[0].msg_type is MsgType.ROLLBACK_NOTICE
    p.apply(Role.ORIGIN, p.outbox.pop(0))
    with pytest.raises(CommitPointPassed):
        rollback(p.origin, ORIGIN)


def test_recovery_update_sends_missing_suffix():
    p = Pair()
    p.deliver_all(until=MsgType.COMMIT_PREPARE)
    behind = replace(p.dest, chain=p.dest.chain[:2])
    req = recovery_request(behind, G2)
    assert req.payload["last_seq"] == 2 and req.payload["last_hash"] == behind.chain[-1].hash
    update = handle_recovery_request(p.origin, req, G1)
    assert update.payload["messages"] == [m.encoded for m in p.origin.chain[2:]]


def test_recovery_update_sends_full_chain_on_fork():
    p = Pair()
    p.deliver_all(until=MsgType.LOCK_RECEIPT)
    p.outbox.clear()  # the receipt is lost; the origin times out
    p.apply(Role.ORIGIN, Trigger(TriggerKind.TIMEOUT))
    req = recovery_request(p.dest, G2)
    update = handle_recovery_request(p.origin, req, G1)
    assert update.payload["messages"] == [m.encoded for m in p.origin.chain]


def test_unknown_session_update():
    req = make_control(MsgType.RECOVERY_REQUEST, "nope", {"role": "ORIGIN", "last_seq": 0}, G2)
    update = handle_recovery_request(None, req, G1)
    assert update.payload["unknown"] is True and update.payload["messages"] == []
