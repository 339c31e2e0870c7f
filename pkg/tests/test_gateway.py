import pytest
from hypothesis import given, strategies as st

from satp_gateway import encoding
from satp_gateway.gateway import PreFlightFailed, TransferRequest, UnknownPeer, UnknownSession, UnservedNetwork
from satp_gateway.harness.audit import audit_verify, bundle_records
from satp_gateway.harness.scenario import blocked_beneficiary, happy_path, transfer_request
from satp_gateway.harness.sim import run_scenario


@pytest.fixture
def done():
    return run_scenario(happy_path())


def _request(**kw):
    data = transfer_request("N1", "N1:00001", "N2", "G2", 100, request_id="tx2")
    data.update(kw)
    return TransferRequest.from_dict(data)


def test_status(done):
    g1 = done.gateway_objects["G1"]
    status = g1.api1_get_status("G1/tx1")
    assert status["phase"] == "COMPLETED" and status["terminal"] and status["role"] == "ORIGIN"
    assert set(status["evidence"]) == {"LOCK", "BURN", "MINT"}
    with pytest.raises(UnknownSession):
        g1.api1_get_status("nope")


def test_api1_errors(done):
    g1 = done.gateway_objects["G1"]
    with pytest.raises(UnservedNetwork):
        g1.api1_initiate_transfer(_request(origin_network="N2"))
    with pytest.raises(UnknownPeer):
        g1.api1_initiate_transfer(_request(destination_gateway="G9"))
    with pytest.raises(PreFlightFailed) as err:
        g1.api1_initiate_transfer(_request())  # the asset is already burned
    assert "ASSET_NOT_FREE" in err.value.report.codes
    with pytest.raises(ValueError):
        TransferRequest.from_dict({"origin_network": "N1"})
    with pytest.raises(TypeError):
        TransferRequest.from_dict({**_request().to_dict(), "amount": "100"})


def test_preflight_is_a_dry_run(done):
    g1 = done.gateway_objects["G1"]
    before = len(g1.wal)
    report = g1.api1_pre_flight(_request(travel_rule={}))
    assert not report.passed and "MISSING_ORIGINATOR_NAME" in report.codes
    assert len(g1.wal) == before


def test_resubmitted_request_is_idempotent(done):
    g1 = done.gateway_objects["G1"]
    before = len(g1.wal)
    assert g1.api1_initiate_transfer(_request(request_id="tx1")) == "G1/tx1"
    assert len(g1.wal) == before


def test_blocked_party_rejected_at_preflight():
    t = run_scenario(blocked_beneficiary())
    assert t.session_ids() == []
    assert "IDENTITY_BLOCKED" in t.submissions[0]["codes"]


@pytest.fixture(scope="module")
def receiver():
    return run_scenario(happy_path()).gateway_objects["G2"]


@given(raw=st.binary(max_size=200))
def test_api2_total_over_bytes(receiver, raw):
    ack = receiver.api2_receive_message(raw)
    assert ack.ok is False or ack.ignored


def test_api2_mutated_frames(done):
    g2 = done.gateway_objects["G2"]
    frame = done.messages[0].raw
    for i in range(len(frame)):
        mutated = bytearray(frame)
        mutated[i] ^= 0x20
        ack = g2.api2_receive_message(bytes(mutated))
        assert not (ack.ok and not ack.ignored), i


def test_duplicate_message_is_acked_and_ignored(done):
    g2 = done.gateway_objects["G2"]
    before = len(g2.wal)
    for m in done.messages:
        if m.dst == "G2" and m.chained:
            ack = g2.api2_receive_message(m.raw)
            assert ack.ok and ack.ignored
    assert len(g2.wal) == before


def test_isolation(done):
    assert {(c.role, c.network) for c in done.gateway_objects["G1"].command_log} == {("ORIGIN", "N1")}
    assert {(c.role, c.network) for c in done.gateway_objects["G2"].command_log} == {("DESTINATION", "N2")}


def test_export_filters(done, fixture_keys):
    g1 = done.gateway_objects["G1"]
    full = g1.export_transaction_history()
    assert audit_verify(full, fixture_keys).sessions == 1
    empty = g1.export_transaction_history(session="other")
    result = audit_verify(empty, fixture_keys)
    assert result.ok and result.sessions == 0
    assert [r["type"] for r in bundle_records(empty)] == ["header", "seal"]
    assert audit_verify(g1.export_transaction_history(party="acct-bob"), fixture_keys).sessions == 1
    assert audit_verify(g1.export_transaction_history(network="N7"), fixture_keys).sessions == 0
    assert audit_verify(g1.export_transaction_history(time_range=(10_000, 20_000)), fixture_keys).sessions == 0


def test_export_deterministic():
    a = run_scenario(happy_path()).gateway_objects["G1"].export_transaction_history()
    b = run_scenario(happy_path()).gateway_objects["G1"].export_transaction_history()
    assert a == b
    assert encoding.load_lines(a)[0]["schema"] == "satp-bundle/1"
