#!/usr/bin/env python3
"""Two live gateways on loopback: deploy, transfer, export, audit.

Starts G1 and G2 in this process from the happy-path scenario, submits one
transfer through API1, waits for both sides to finish, then pulls G1's
evidence bundle and verifies it offline with the fixture public keys.
"""

from __future__ import annotations

import argparse
import tempfile
import time
from pathlib import Path

from satp_gateway.harness.audit import audit_verify
from satp_gateway.harness.deploy import write_deployment
from satp_gateway.harness.scenario import happy_path, transfer_request
from satp_gateway.harness.sim import Simulation
from satp_gateway.server import GatewayNode, api1_call, load_node_config, session_path


def phase(url: str, sid: str):
    code, body = api1_call(url, "GET", f"/api1/transfers/{session_path(sid)}")
    return body.get("phase") if code == 200 else None


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--base-port", type=int, default=9000)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--dir", help="deployment directory (default: a temp dir)")
    args = p.parse_args(argv)

    scenario = happy_path()
    root = Path(args.dir or tempfile.mkdtemp(prefix="satp-demo-"))
    write_deployment(scenario, root, base_port=args.base_port)
    nodes = [GatewayNode(load_node_config(root / f"{g}.json")) for g in ("G1", "G2")]
    for node in nodes:
        node.start()
    g1, g2 = nodes
    try:
        request = transfer_request("N1", "N1:00001", "N2", "G2", 100, request_id="demo")
        code, body = api1_call(g1.api1_url, "POST", "/api1/transfers", request)
        print(f"submit -> {code} {body}")
        if code != 201:
            return 1
        sid = body["session_id"]
        deadline = time.monotonic() + args.timeout
        while time.monotonic() < deadline:
            phases = (phase(g1.api1_url, sid), phase(g2.api1_url, sid))
            if all(ph in ("COMPLETED", "ROLLED_BACK") for ph in phases):
                break
            time.sleep(0.1)
        print(f"phases  G1={phases[0]} G2={phases[1]}")
        for net, node in (("N1", g1), ("N2", g2)):
            print(f"ledger  {net}: {[r.op for r in node.ledgers[net].records]}")
        code, bundle = api1_call(g1.api1_url, "GET", f"/api1/export?session={sid.replace('/', '%2F')}")
        report = audit_verify(bundle, Simulation(scenario, check=False).keys)
        print(f"audit   {len(bundle)} bytes: {report}")
        print(f"state in {root}")
        return 0 if report.ok and phases == ("COMPLETED", "COMPLETED") else 1
    finally:
        for node in nodes:
            node.stop()


if __name__ == "__main__":
    raise SystemExit(main())
