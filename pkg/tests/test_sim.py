import pytest

from satp_gateway.harness.scenario import Chaos, FaultKind, FaultSpec, ScenarioError, happy_path, load_scenario, save_scenario
from satp_gateway.harness.sim import NON_QUIESCENT, QUIESCENT, run_scenario


def _crash(gateway, anchor, restart_after=3):
    return happy_path().replace(faults=[FaultSpec(FaultKind.CRASH_GATEWAY, target=gateway, anchor=anchor,
                                                  restart_after=restart_after)])


def _ops(trace, net):
    return [r.op for r in trace.ledgers[net] if r.op != "ISSUE"]


def test_happy_path_anchor_counts(happy_trace):
    per = {}
    for gid, _ in happy_trace.anchors:
        per[gid] = per.get(gid, 0) + 1
    assert per == {"G1": 32, "G2": 27}
    assert len({a for a in happy_trace.anchors}) == len(happy_trace.anchors)


def test_same_seed_same_bytes():
    sc = happy_path().replace(chaos=Chaos(drop=0.2, duplicate=0.2, delay=0.2), seed=11)
    assert run_scenario(sc).export() == run_scenario(sc).export()


def test_lock_then_crash_before_assertion_send():
    t = run_scenario(_crash("G1", "wal:MESSAGE_SENT:LOCK_ASSERTION#1"))
    assert t.phases("G1/tx1") == {"ORIGIN": "COMPLETED", "DESTINATION": "COMPLETED"} and t.passed


def test_origin_crash_after_commit_point_before_burn():
    t = run_scenario(_crash("G1", "wal:COMMIT_POINT:PREPARED#1"))
    assert t.phases("G1/tx1")["ORIGIN"] == "COMPLETED"
    assert _ops(t, "N1") == ["LOCK", "BURN"] and t.passed


def test_destination_crash_after_mint_before_ack():
    t = run_scenario(_crash("G2", "ledger:MINT#1"))
    assert t.phases("G1/tx1") == {"ORIGIN": "COMPLETED", "DESTINATION": "COMPLETED"}
    assert _ops(t, "N2") == ["MINT"] and t.passed


def test_origin_down_before_any_wal_write():
    t = run_scenario(_crash("G1", "wal:EVIDENCE:PREFLIGHT#1", restart_after=400))
    assert t.session_ids() == [] and _ops(t, "N1") == [] and t.passed


@pytest.mark.parametrize("fault", [
    FaultSpec(FaultKind.DROP_MESSAGE, msg_type="COMMIT_READY"),
    FaultSpec(FaultKind.DELAY_MESSAGE, msg_type="LOCK_ASSERTION", delay=30),
    FaultSpec(FaultKind.DUPLICATE_MESSAGE, msg_type="COMMIT_FINAL", count=3),
])
def test_message_faults_still_complete(fault):
    t = run_scenario(happy_path().replace(faults=[fault]))
    assert t.phases("G1/tx1") == {"ORIGIN": "COMPLETED", "DESTINATION": "COMPLETED"}
    assert _ops(t, "N2") == ["MINT"] and t.passed


def test_partition_then_heal():
    faults = [FaultSpec(FaultKind.PARTITION, target="G1,G2", at=1), FaultSpec(FaultKind.HEAL, target="G1,G2", at=6)]
    t = run_scenario(happy_path().replace(faults=faults))
    assert t.phases("G1/tx1")["ORIGIN"] == "COMPLETED" and t.passed


def test_non_quiescent_reported():
    sc = happy_path().replace(max_logical_time=2)
    assert run_scenario(sc).outcome == NON_QUIESCENT
    assert run_scenario(happy_path()).outcome == QUIESCENT


def test_scenario_file_roundtrip(tmp_path):
    sc = _crash("G2", "ledger:MINT#1")
    save_scenario(sc, tmp_path / "s.json")
    assert load_scenario(tmp_path / "s.json").to_dict() == sc.to_dict()


@pytest.mark.parametrize("bad", [
    lambda: FaultSpec(FaultKind.CRASH_GATEWAY, target="G1"),
    lambda: FaultSpec(FaultKind.PARTITION, target="G1,G2"),
    lambda: happy_path().replace(gateways=[]),
])
def test_invalid_scenarios(bad):
    with pytest.raises(ScenarioError):
        bad()


def test_load_scenario_errors(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("[]")
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "bad.json")
