import json

import pytest

from satp_gateway.harness.cli import EXIT_FAIL, EXIT_PASS, EXIT_USAGE, main
from satp_gateway.harness.scenario import happy_path, save_scenario
from satp_gateway.harness.sim import run_scenario

from conftest import FIXTURES


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "happy.json"
    save_scenario(happy_path(), path)
    return path


def test_run_writes_artifacts(tmp_path, scenario_file, capsys):
    trace, bundle, keys = tmp_path / "t.ndjson", tmp_path / "g1.bundle", tmp_path / "keys.json"
    code = main(["run", str(scenario_file), "--export", str(trace), "--bundle", f"G1={bundle}",
                 "--keys-out", str(keys)])
    assert code == EXIT_PASS
    assert "origin=COMPLETED destination=COMPLETED" in capsys.readouterr().out
    assert trace.read_bytes() == run_scenario(happy_path()).export()
    assert main(["audit", str(bundle), "--keys", str(keys)]) == EXIT_PASS
    assert main(["audit", str(bundle), "--scenario", str(scenario_file)]) == EXIT_PASS


def test_audit_exit_codes(tmp_path, capsys):
    keys = str(FIXTURES / "keys.json")
    assert main(["audit", str(FIXTURES / "completed.bundle"), "--keys", keys]) == EXIT_PASS
    bad = tmp_path / "bad.bundle"
    data = bytearray((FIXTURES / "completed.bundle").read_bytes())
    data[100] ^= 1
    bad.write_bytes(bytes(data))
    assert main(["audit", str(bad), "--keys", keys]) == EXIT_FAIL
    assert "REJECT" in capsys.readouterr().out
    assert main(["audit", str(tmp_path / "missing.bundle"), "--keys", keys]) == EXIT_USAGE
    assert main(["audit", str(bad)]) == EXIT_USAGE


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["run"]) == EXIT_USAGE
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_USAGE
    (tmp_path / "bad.json").write_text("{}")
    assert main(["run", str(tmp_path / "bad.json")]) == EXIT_USAGE
    assert main(["status", "G1", "x", "--deploy", str(tmp_path)]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_PASS


def test_failing_invariant_exits_one(tmp_path, monkeypatch, scenario_file):
    from satp_gateway.harness import invariants
    from satp_gateway.harness.invariants import InvariantVerdict
    monkeypatch.setattr(invariants, "CHECKS", (lambda trace: InvariantVerdict("forced", False, ("x",)),))
    assert main(["run", str(scenario_file)]) == EXIT_FAIL


def test_deploy_and_offline_status(tmp_path, scenario_file, capsys):
    out = tmp_path / "deploy"
    assert main(["deploy", str(scenario_file), "--out", str(out), "--base-port", "39000"]) == EXIT_PASS
    cfg = json.loads((out / "G1.json").read_text())
    assert cfg["api1_addr"] == "127.0.0.1:39000" and cfg["peers"]["G2"]["endpoint"] == "http://127.0.0.1:39101"
    # nothing is listening and no WAL exists yet
    assert main(["status", "G1", "G1/tx1", "--deploy", str(out)]) == EXIT_USAGE


def test_matrix_and_fuzz_commands(scenario_file, capsys):
    assert main(["matrix", str(scenario_file)]) == EXIT_PASS
    assert "0 failed; complete" in capsys.readouterr().out
    assert main(["fuzz", "--runs", "3", "--seed", "1", "--spot-checks", "1"]) == EXIT_PASS
