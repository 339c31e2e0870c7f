"""Command line entry point (``satp``).

Exit codes: 0 pass, 1 invariant failure or rejected audit, 2 usage/IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from ..config import ConfigError
from ..crypto import KeyRing

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write(path: str, data: bytes | str) -> None:
    try:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data) if isinstance(data, bytes) else p.write_text(data)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _scenario(path: str):
    from .scenario import ScenarioError, load_scenario
    try:
        return load_scenario(path)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from exc


# -- simulation commands --------------------------------------------------------

def cmd_run(args) -> int:
    from .sim import run_scenario
    scenario = _scenario(args.scenario)
    started = time.perf_counter()
    trace = run_scenario(scenario)
    elapsed = time.perf_counter() - started
    print(f"scenario {scenario.name or args.scenario} seed {scenario.seed}: {trace.outcome}"
          f" at t={trace.end_time} ({elapsed * 1000:.0f} ms)")
    for sid in trace.session_ids():
        ph = trace.phases(sid)
        print(f"  {sid:<16} origin={ph['ORIGIN']} destination={ph['DESTINATION']}")
    for idx, sub in sorted(trace.submissions.items()):
        if "session_id" not in sub or sub.get("status") not in (None, "accepted"):
            print(f"  transfer {idx}: {sub}")
    for gid, sid, role in trace.parked():
        print(f"  parked: {gid} {sid}/{role}")
    for net, records in trace.ledgers.items():
        ops = " ".join(r.op for r in records if r.op != "ISSUE")
        print(f"  {net}: {ops or '-'}")
    for v in trace.verdicts:
        print(f"  {v}")
    if args.export:
        _write(args.export, trace.export())
    if args.keys_out:
        _write(args.keys_out, json.dumps(trace.keys.to_json(), indent=2, sort_keys=True) + "\n")
    for spec in args.bundle or []:
        gid, _, path = spec.partition("=")
        gw = trace.gateway_objects.get(gid)
        if not path or gw is None:
            raise UsageError(f"--bundle wants GATEWAY=PATH for a gateway that is up at the end, got {spec!r}")
        _write(path, gw.export_transaction_history(session=args.session))
    return EXIT_PASS if trace.passed else EXIT_FAIL


def cmd_matrix(args) -> int:
    from .matrix import crash_point_matrix
    scenario = _scenario(args.scenario)
    started = time.perf_counter()
    report = crash_point_matrix(scenario)
    for row in report.rows:
        if args.all_rows or not row.ok:
            print(row.line())
    print(f"{report.summary()} ({time.perf_counter() - started:.1f} s)")
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_fuzz(args) -> int:
    from .matrix import fuzz
    started = time.perf_counter()
    report = fuzz(args.runs, args.seed, transfers=args.transfers, determinism_spot_checks=args.spot_checks)
    for f in report.failures[:20]:
        print(f"  seed {f['seed']}: {'; '.join(f['problems'])}")
    for s in report.nondeterministic:
        print(f"  seed {s}: rerun was not byte-identical")
    print(f"{report.summary()} ({time.perf_counter() - started:.1f} s)")
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_audit(args) -> int:
    from .audit import audit_verify
    try:
        bundle = Path(args.bundle).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read bundle {args.bundle}: {exc.strerror or exc}") from exc
    if args.keys:
        try:
            keys = KeyRing.from_json(json.loads(Path(args.keys).read_text()))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read keys {args.keys}: {exc}") from exc
    elif args.scenario:
        from .sim import Simulation
        keys = Simulation(_scenario(args.scenario), check=False).keys
    else:
        raise UsageError("audit needs --keys FILE or --scenario FILE to know the signers")
    result = audit_verify(bundle, keys)
    print(result)
    return EXIT_PASS if result.ok else EXIT_FAIL


def cmd_deploy(args) -> int:
    from .deploy import write_deployment
    for path in write_deployment(_scenario(args.scenario), args.out, args.host, args.base_port):
        print(path)
    return EXIT_PASS


# -- live commands ----------------------------------------------------------------

def _node_config(args, gateway: str | None = None):
    from ..server import load_node_config
    path = args.config or (Path(args.deploy) / f"{gateway}.json")
    try:
        return load_node_config(path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _api1(args, gateway: str) -> str:
    if args.endpoint:
        return args.endpoint
    return "http://" + _node_config(args, gateway).gateway.api1_addr


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_status(args) -> int:
    from ..server import api1_call, session_path
    try:
        code, body = api1_call(_api1(args, args.gateway), "GET", f"/api1/transfers/{session_path(args.session)}")
    except OSError as exc:
        if args.endpoint:
            raise UsageError(f"gateway unreachable: {exc}") from exc
        return _offline_status(args)
    _print_json(body)
    return EXIT_PASS if code == 200 else EXIT_FAIL


def _offline_status(args) -> int:
    """Gateway down: read its WAL directly (read-only)."""
    from ..recovery import FileWalStore, recover
    node = _node_config(args, args.gateway)
    if not node.gateway.wal_path or not Path(node.gateway.wal_path).exists():
        raise UsageError(f"{args.gateway} is unreachable and has no WAL on disk")
    state, _ = recover(FileWalStore(node.gateway.wal_path).load())
    found = {k[1].value: s for k, s in state.sessions.items() if k[0] == args.session}
    if not found:
        print(f"unknown session {args.session} (offline WAL of {args.gateway})")
        return EXIT_FAIL
    _print_json({"offline": True, "session_id": args.session,
                 "roles": {r: {"phase": s.phase.value, "parked": s.parked, "terminal": s.terminal}
                           for r, s in sorted(found.items())}})
    return EXIT_PASS


def cmd_resume(args) -> int:
    from ..server import api1_call, session_path
    try:
        code, body = api1_call(_api1(args, args.gateway), "POST",
                               f"/api1/transfers/{session_path(args.session)}/resume", {})
    except OSError as exc:
        raise UsageError(f"gateway unreachable: {exc}") from exc
    _print_json(body)
    return EXIT_PASS if code == 200 else EXIT_FAIL


def cmd_submit(args) -> int:
    from ..server import api1_call
    try:
        request = json.loads(Path(args.request).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read request {args.request}: {exc}") from exc
    path = "/api1/preflight" if args.dry_run else "/api1/transfers"
    try:
        code, body = api1_call(_api1(args, args.gateway), "POST", path, request)
    except OSError as exc:
        raise UsageError(f"gateway unreachable: {exc}") from exc
    _print_json(body)
    return EXIT_PASS if code in (200, 201) else EXIT_FAIL


def cmd_export(args) -> int:
    from urllib.parse import urlencode
    from ..server import api1_call
    query = {k: v for k, v in (("session", args.session), ("party", args.party), ("network", args.network))
             if v is not None}
    try:
        code, body = api1_call(_api1(args, args.gateway), "GET", f"/api1/export?{urlencode(query)}")
    except OSError as exc:
        raise UsageError(f"gateway unreachable: {exc}") from exc
    if code != 200 or not isinstance(body, bytes):
        _print_json(body)
        return EXIT_FAIL
    _write(args.out, body)
    return EXIT_PASS


def cmd_serve(args) -> int:
    import os
    from ..server import GatewayNode
    env = dict(os.environ)
    if args.api1:
        env["SATP_API1_ADDR"] = args.api1
    if args.api2:
        env["SATP_API2_ADDR"] = args.api2
    from ..server import load_node_config
    try:
        node = GatewayNode(load_node_config(args.config, env))
        node.start()
    except (ConfigError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    print(f"{node.gateway.id}: API1 {node.api1_url}  API2 {node.api2_url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        node.stop()
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="satp", description="Asset transfer gateways: simulate, verify, serve.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run a scenario to quiescence and check invariants")
    s.add_argument("scenario")
    s.add_argument("--export", metavar="PATH", help="write the canonical trace")
    s.add_argument("--bundle", action="append", metavar="GATEWAY=PATH", help="write a gateway's evidence bundle")
    s.add_argument("--session", help="restrict --bundle to one session")
    s.add_argument("--keys-out", metavar="PATH", help="write the public keys an auditor needs")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("matrix", help="crash every instrumentation anchor of a one-transfer scenario")
    s.add_argument("scenario")
    s.add_argument("--all-rows", action="store_true", help="print every row, not just failures")
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("fuzz", help="seeded random fault campaign")
    s.add_argument("--runs", type=int, default=1000)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--transfers", type=int, default=10)
    s.add_argument("--spot-checks", type=int, default=10, help="seeds re-run to compare traces byte for byte")
    s.set_defaults(func=cmd_fuzz)

    s = sub.add_parser("audit", help="verify an evidence bundle offline")
    s.add_argument("bundle")
    s.add_argument("--keys", help="JSON map of signer id to hex public key")
    s.add_argument("--scenario", help="derive the fixture keys of a scenario instead")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("deploy", help="write live node configs for a scenario")
    s.add_argument("scenario")
    s.add_argument("--out", default="deploy")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--base-port", type=int, default=9000)
    s.set_defaults(func=cmd_deploy)

    s = sub.add_parser("serve", help="run one live gateway")
    s.add_argument("--config", required=True)
    s.add_argument("--api1", help="API1 listen address host:port")
    s.add_argument("--api2", help="API2 listen address host:port")
    s.set_defaults(func=cmd_serve)

    for name, func, hlp in (("status", cmd_status, "query a session on a live gateway"),
                            ("resume", cmd_resume, "operator retry of a parked session")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("gateway")
        s.add_argument("session")
        s.set_defaults(func=func)

    s = sub.add_parser("submit", help="send a transfer request to a live gateway")
    s.add_argument("gateway")
    s.add_argument("request", help="TransferRequest JSON file")
    s.add_argument("--dry-run", action="store_true", help="pre-flight only")
    s.set_defaults(func=cmd_submit)

    s = sub.add_parser("export", help="fetch an evidence bundle from a live gateway")
    s.add_argument("gateway")
    s.add_argument("--out", required=True)
    s.add_argument("--session")
    s.add_argument("--party")
    s.add_argument("--network")
    s.set_defaults(func=cmd_export)

    for name in ("status", "resume", "submit", "export"):
        s = sub.choices[name]
        s.add_argument("--deploy", default="deploy", help="directory of node configs (<gateway>.json)")
        s.add_argument("--config", help="node config file (overrides --deploy)")
        s.add_argument("--endpoint", help="API1 base URL (overrides the config)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose if isinstance(args.verbose, int) else 0,
                                                      logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"satp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
