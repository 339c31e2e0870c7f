import json

import pytest

from satp_gateway.config import ConfigError, GatewayConfig, Timeouts, load_config
from satp_gateway.crypto import KeyPair

PEER = KeyPair.from_seed("G2", "gateway-G2").public.hex()


def _data(**kw):
    data = {"gateway_id": "G1", "served_networks": ["N1"],
            "peers": {"G2": {"public_key": PEER, "endpoint": "http://a:1"}}}
    data.update(kw)
    return data


def test_roundtrip():
    cfg = GatewayConfig.from_dict(_data(), env={})
    again = GatewayConfig.from_dict(cfg.to_dict(), env={})
    assert again.to_dict() == cfg.to_dict()
    assert cfg.key.public == KeyPair.from_seed("G1", "gateway-G1").public
    assert set(cfg.public_keys()) == {"G1", "G2"}


def test_env_overrides():
    env = {"SATP_API1_ADDR": "0.0.0.0:8000", "SATP_PEER_ENDPOINT_G2": "http://b:2"}
    cfg = GatewayConfig.from_dict(_data(), env=env)
    assert cfg.api1_addr == "0.0.0.0:8000"
    assert cfg.peers["G2"].endpoint == "http://b:2"


@pytest.mark.parametrize("data", [
    {"served_networks": ["N1"]},
    _data(served_networks=[]),
    _data(served_networks=["N1", "N1"]),
    _data(peers={"G2": {"public_key": ""}}),
    _data(peers={"G2": {"public_key": "zz"}}),
    _data(timeouts={"retry_base": 0}),
    _data(timeouts={"bogus": 1}),
])
def test_bad_configs(data):
    with pytest.raises(ConfigError):
        GatewayConfig.from_dict(data, env={})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(_data()))
    assert load_config(good, env={}).gateway_id == "G1"


def test_backoff():
    t = Timeouts()
    assert [t.delay(i) for i in range(6)] == [4, 8, 16, 32, 32, 32]
