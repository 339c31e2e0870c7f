#!/usr/bin/env python3
"""Regenerate scenarios/*.json and the audit fixtures in tests/fixtures/.

Everything here is deterministic: rerunning produces byte-identical files.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from satp_gateway.harness import scenario as sc
from satp_gateway.harness.sim import run_scenario

ROOT = Path(__file__).resolve().parents[1]


def scenarios() -> dict[str, sc.Scenario]:
    out = {
        "happy_path": sc.happy_path(),
        "peer_unreachable": sc.peer_unreachable(),
        "duplicated": sc.duplicated_happy_path(),
        "multi_network_gsp": sc.multi_network_gsp(),
        "blocked_beneficiary": sc.blocked_beneficiary(),
    }
    for field in sc.full_travel_rule():
        out[f"travel_rule_without_{field}"] = sc.travel_rule_gap(field)
    return out


def rejected_transfer() -> sc.Scenario:
    """The destination refuses the proposal (it does not serve N9)."""
    base = sc.happy_path()
    request = sc.transfer_request("N1", "N1:00001", "N9", "G2", 100, request_id="tx1")
    return base.replace(name="rejected", transfers=[sc.TransferSpec(0, "G1", request)])


def fixtures() -> dict[str, bytes]:
    done = run_scenario(sc.happy_path())
    rejected = run_scenario(rejected_transfer())
    return {
        "completed.bundle": done.gateway_objects["G1"].export_transaction_history(),
        "rejected.bundle": rejected.gateway_objects["G2"].export_transaction_history(),
        "empty.bundle": done.gateway_objects["G1"].export_transaction_history(session="no-such-session"),
        "keys.json": (json.dumps(done.keys.to_json(), indent=2, sort_keys=True) + "\n").encode(),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default=str(ROOT))
    args = ap.parse_args()
    root = Path(args.root)
    (root / "scenarios").mkdir(parents=True, exist_ok=True)
    for name, scenario in scenarios().items():
        path = root / "scenarios" / f"{name}.json"
        sc.save_scenario(scenario, path)
        print(path)
    (root / "tests" / "fixtures").mkdir(parents=True, exist_ok=True)
    for name, data in fixtures().items():
        path = root / "tests" / "fixtures" / name
        path.write_bytes(data)
        print(f"{path} ({len(data)} bytes)")


if __name__ == "__main__":
    main()
