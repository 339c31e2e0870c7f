"""Turn a scenario into node files for a live, multi-process deployment."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .scenario import Scenario
from .sim import IDP_ID, gateway_key, idp_key, network_key


def node_configs(scenario: Scenario, host: str = "127.0.0.1", base_port: int = 9000) -> dict[str, dict[str, Any]]:
    """One node config per gateway. API1 listens on base_port+i, API2 on base_port+100+i."""
    gws = sorted(scenario.gateways, key=lambda g: g.gateway_id)
    keys = {g.gateway_id: gateway_key(g.gateway_id, g.key_seed) for g in gws}
    api2 = {g.gateway_id: f"{host}:{base_port + 100 + i}" for i, g in enumerate(gws)}
    nets = {n.id: n for n in scenario.networks}
    network_keys = {nid: network_key(nid).public.hex() for nid in sorted(nets)}
    profiles = [p.to_json() for p in scenario.profiles]
    out = {}
    for i, g in enumerate(gws):
        gid = g.gateway_id
        out[gid] = {
            "gateway_id": gid,
            "key_seed": g.key_seed or f"gateway-{gid}",
            "served_networks": list(g.served_networks),
            "peers": {o: {"public_key": keys[o].public.hex(), "endpoint": f"http://{api2[o]}"}
                      for o in sorted(keys) if o != gid},
            "network_keys": network_keys,
            "idp": {"id": IDP_ID, "public_key": idp_key().public.hex(), "endpoint": "stub"},
            "timeouts": {"retry_base": g.timeouts.retry_base, "retry_max": g.timeouts.retry_max,
                         "retry_cap": g.timeouts.retry_cap, "lock_window": g.timeouts.lock_window},
            "wal_path": f"state/{gid}.wal",
            "api1_addr": f"{host}:{base_port + i}",
            "api2_addr": api2[gid],
            "ledgers": {nid: {"notary_seed": f"network-{nid}", "visibility": nets[nid].visibility,
                              "journal": f"state/{nid}.ledger", "assets": list(nets[nid].assets)}
                        for nid in g.served_networks},
            "profiles": profiles,
            "identity": {"key_seed": "identity-provider",
                         "default": scenario.identity.get("default", "VERIFIED"),
                         "verdicts": dict(scenario.identity.get("verdicts", {})),
                         "online": scenario.identity.get("online", True),
                         "ttl": scenario.identity.get("ttl", 1000)},
            "tick_seconds": 0.05,
        }
    return out


def write_deployment(scenario: Scenario, directory: str | Path, host: str = "127.0.0.1",
                     base_port: int = 9000) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for gid, cfg in node_configs(scenario, host, base_port).items():
        path = directory / f"{gid}.json"
        path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return paths
