import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from satp_gateway.crypto import KeyRing

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixture_keys() -> KeyRing:
    return KeyRing.from_json(json.loads((FIXTURES / "keys.json").read_text()))


@pytest.fixture(scope="session")
def happy_trace():
    from satp_gateway.harness.scenario import happy_path
    from satp_gateway.harness.sim import run_scenario
    return run_scenario(happy_path())
