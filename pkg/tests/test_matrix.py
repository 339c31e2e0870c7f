from satp_gateway.harness.matrix import MODES, crash_point_matrix, fuzz, fuzz_base, random_scenario
from satp_gateway.harness.scenario import happy_path
from satp_gateway.harness.sim import run_scenario


def test_matrix_covers_every_anchor(happy_trace):
    report = crash_point_matrix(happy_path())
    assert report.complete
    assert len(report.anchors) == len(happy_trace.anchors)
    assert len(report.rows) == len(report.anchors) * len(MODES)
    bad = [r.line() for r in report.rows if not r.ok]
    assert not bad, "\n".join(bad)


def test_matrix_rows_classified():
    report = crash_point_matrix(happy_path(), modes={"stay-down": MODES["stay-down"]})
    for row in report.rows:
        if row.commit == "pre":
            assert row.origin_asset == "FREE" and row.mints == 0
        else:
            assert row.origin_asset == "BURNED" and row.mints in (0, 1)


def test_random_scenarios_deterministic():
    for seed in (1, 2, 3):
        assert random_scenario(seed).to_dict() == random_scenario(seed).to_dict()
        assert run_scenario(random_scenario(seed)).export() == run_scenario(random_scenario(seed)).export()


def test_fuzz_shape():
    assert len(fuzz_base(10).networks) == 4
    sc = random_scenario(5, transfers=10)
    assert len(sc.transfers) == 10
    assert len({t.gateway for t in sc.transfers}) > 1


def test_small_fuzz_campaign():
    report = fuzz(25, seed=3, determinism_spot_checks=3)
    assert report.passed, report.summary()
    assert len(report.determinism_checked) == 3
