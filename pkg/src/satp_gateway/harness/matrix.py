"""Exhaustive crash-point matrix and the randomized fault campaign."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

from ..ledger import AssetStatus, LedgerOp, replay_records
from ..protocol import Phase, Role
from ..recovery import WalKind
from .scenario import (
    DEFAULT_PROFILE,
    Chaos,
    FaultKind,
    FaultSpec,
    GatewaySpec,
    NetworkSpec,
    Scenario,
    TransferSpec,
    transfer_request,
)
from .sim import ExecutionTrace, run_scenario

RESTART_AFTER = 3        # "restart": back before the peer notices
STAY_DOWN_FOR = 400      # "stay-down": past the peer's retry cap and the lock window
MODES = {"restart": RESTART_AFTER, "stay-down": STAY_DOWN_FOR}
_TERMINAL_OK = {Phase.COMPLETED.value, Phase.ROLLED_BACK.value}


@dataclass
class MatrixRow:
    gateway: str
    role: str
    anchor: str
    mode: str
    commit: str                 # "pre" or "post": did the origin log its commit point
    origin_phase: str | None
    destination_phase: str | None
    parked: bool
    origin_asset: str | None
    mints: int
    invariants_ok: bool
    problems: list[str]
    ok: bool

    def line(self) -> str:
        mark = "ok  " if self.ok else "FAIL"
        return (f"[{mark}] {self.gateway}/{self.role[:4]} {self.anchor:<44} {self.mode:<9} {self.commit:<4}"
                f" origin={self.origin_phase} dest={self.destination_phase} asset={self.origin_asset}"
                f" mints={self.mints}{' parked' if self.parked else ''}"
                + (f"  {'; '.join(self.problems)}" if self.problems else ""))


@dataclass
class MatrixReport:
    anchors: list[tuple[str, str]]
    modes: dict[str, int] = field(default_factory=lambda: dict(MODES))
    rows: list[MatrixRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.ok for r in self.rows) and self.complete

    @property
    def complete(self) -> bool:
        """Every recorded anchor was crashed, in every mode."""
        fired = {(r.gateway, r.anchor) for r in self.rows if "crash never fired" not in r.problems}
        return fired == set(self.anchors) and len(self.rows) == len(self.anchors) * len(self.modes)

    @property
    def anchors_per_gateway(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for gid, _ in self.anchors:
            out[gid] = out.get(gid, 0) + 1
        return out

    def summary(self) -> str:
        failed = sum(not r.ok for r in self.rows)
        per = ", ".join(f"{g}: {n}" for g, n in sorted(self.anchors_per_gateway.items()))
        return (f"{len(self.rows)} rows over {len(self.anchors)} anchors ({per}) x {len(self.modes)} modes;"
                f" {failed} failed; {'complete' if self.complete else 'INCOMPLETE'}")


def _single_session(trace: ExecutionTrace) -> str | None:
    ids = trace.session_ids()
    return ids[0] if ids else None


def classify(trace: ExecutionTrace, base: Scenario, gateway: str, anchor: str, mode: str) -> MatrixRow:
    request = base.transfers[0].request
    origin_gw = base.transfers[0].gateway
    origin_net, dest_net = request["origin_network"], request["destination_network"]
    sid = _single_session(trace)
    phases = trace.phases(sid) if sid else {"ORIGIN": None, "DESTINATION": None}
    committed = any(e.kind == WalKind.COMMIT_POINT.value and e.role == Role.ORIGIN.value
                    for e in trace.wals[origin_gw])
    assets, _ = replay_records(trace.ledgers[origin_net])
    asset = assets.get(request["asset_id"])
    mints = sum(r.op == LedgerOp.MINT.value for r in trace.ledgers[dest_net])
    parked = bool(trace.parked())
    problems = [p for v in trace.verdicts if not v.passed for p in v.problems]
    if trace.outcome != "QUIESCENT":
        problems.append(trace.outcome)
    if not any(e["kind"] == "crash" and e.get("reason") == anchor and e.get("gateway") == gateway
               for e in trace.events):
        problems.append("crash never fired")  # a silent skip would hide an untested anchor

    origin_phase, dest_phase = phases["ORIGIN"], phases["DESTINATION"]
    ends_ok = origin_phase in _TERMINAL_OK or parked or origin_phase is None
    if not ends_ok:
        problems.append(f"origin ended in {origin_phase}")
    if mode == "restart":
        if origin_phase != Phase.COMPLETED.value or dest_phase != Phase.COMPLETED.value:
            problems.append("restart row did not complete")
    elif not committed:
        if asset is None or asset.status is not AssetStatus.FREE:
            problems.append("pre-commit stay-down left the origin asset "
                            f"{asset.status.value if asset else 'missing'}")
        if origin_phase not in (Phase.ROLLED_BACK.value, None):
            problems.append(f"pre-commit stay-down origin ended {origin_phase}")
        if mints:
            problems.append("pre-commit stay-down minted")
    else:
        burned = asset is not None and asset.status is AssetStatus.BURNED
        dest_pending = dest_phase in (Phase.PREPARED.value, Phase.COMMITTED_DESTINATION.value) and parked
        if not burned:
            problems.append("post-commit row did not burn at origin")
        if mints != 1 and not (mints == 0 and dest_pending):
            problems.append(f"post-commit row minted {mints} times")
        if origin_phase == Phase.ROLLED_BACK.value:
            problems.append("post-commit row rolled back")
    role = "ORIGIN" if gateway == origin_gw else "DESTINATION"
    return MatrixRow(
        gateway=gateway, role=role, anchor=anchor, mode=mode, commit="post" if committed else "pre",
        origin_phase=origin_phase, destination_phase=dest_phase, parked=parked,
        origin_asset=asset.status.value if asset else None, mints=mints,
        invariants_ok=trace.passed, problems=problems, ok=not problems,
    )


def crash_point_matrix(base: Scenario, modes: dict[str, int] | None = None) -> MatrixReport:
    """Crash every instrumentation point of a one-transfer run, in each mode."""
    if len(base.transfers) != 1:
        raise ValueError("the crash-point matrix needs a scenario with exactly one transfer")
    modes = MODES if modes is None else modes
    baseline = run_scenario(base)
    request = base.transfers[0].request
    involved = {base.transfers[0].gateway, request["destination_gateway"]}
    anchors = [(g, a) for g, a in baseline.anchors if g in involved]
    report = MatrixReport(anchors=anchors, modes=dict(modes))
    for gid, anchor in anchors:
        for mode, down in modes.items():
            fault = FaultSpec(FaultKind.CRASH_GATEWAY, target=gid, anchor=anchor, restart_after=down)
            scenario = base.replace(faults=[*base.faults, fault], name=f"{base.name}@{gid}:{anchor}:{mode}")
            trace = run_scenario(scenario)
            report.rows.append(classify(trace, base, gid, anchor, mode))
    return report


# -- randomized fault campaign ---------------------------------------------------

def fuzz_base(transfers: int = 10) -> Scenario:
    """Four networks behind three gateways; G1 serves two of them."""
    networks = [NetworkSpec(n, assets=[{"profile_id": DEFAULT_PROFILE.profile_id, "owner": "acct-alice",
                                        "amount": 100 + 10 * i} for i in range(transfers)])
                for n in ("N1", "N2", "N3", "N4")]
    return Scenario(
        name="fuzz",
        profiles=[DEFAULT_PROFILE],
        networks=networks,
        gateways=[GatewaySpec("G1", ["N1", "N2"]), GatewaySpec("G2", ["N3"]), GatewaySpec("G3", ["N4"])],
        identity={"default": "VERIFIED"},
        max_logical_time=3000,
    )


def random_scenario(seed: int, transfers: int = 10) -> Scenario:
    rng = random.Random(seed)
    base = fuzz_base(transfers)
    owner = base.network_owner()
    nets = sorted(owner)
    used: dict[str, int] = {n: 0 for n in nets}
    specs = []
    for i in range(transfers):
        src = rng.choice(nets)
        dst = rng.choice([n for n in nets if n != src])
        used[src] += 1
        asset = f"{src}:{used[src]:05d}"
        amount = 100 + 10 * (used[src] - 1)
        specs.append(TransferSpec(rng.randint(0, 40), owner[src],
                                  transfer_request(src, asset, dst, owner[dst], amount, request_id=f"f{i}")))
    gateways = sorted({g.gateway_id for g in base.gateways})
    faults = []
    for _ in range(rng.randint(0, 3)):
        gid = rng.choice(gateways)
        down = rng.choice([rng.randint(1, 20), rng.randint(150, 450)])
        if rng.random() < 0.5:
            faults.append(FaultSpec(FaultKind.CRASH_GATEWAY, target=gid, at=rng.randint(0, 120),
                                    restart_after=down))
        else:
            kind = rng.choice(["recv", "wal", "send", "ledger"])
            anchor = {
                "recv": lambda: f"recv:{rng.choice(['PROPOSAL', 'LOCK_ASSERTION', 'COMMIT_READY', 'COMMIT_FINAL', 'ACK_COMMIT_FINAL'])}",
                "wal": lambda: rng.choice(["wal:COMMIT_POINT:PREPARED", "wal:INTENT:LOCK", "wal:INTENT:MINT",
                                           "wal:MESSAGE_SENT:COMMIT_FINAL", "wal:EVIDENCE:BURN",
                                           "wal:STATE_TRANSITION:ACCEPTED"]),
                "send": lambda: f"send:{rng.choice(['PROPOSAL_RECEIPT', 'LOCK_RECEIPT', 'COMMIT_PREPARE', 'TRANSFER_COMPLETE'])}",
                "ledger": lambda: f"ledger:{rng.choice(['LOCK', 'BURN', 'MINT'])}",
            }[kind]()
            faults.append(FaultSpec(FaultKind.CRASH_GATEWAY, target=gid,
                                    anchor=f"{anchor}#{rng.randint(1, 3)}", restart_after=down))
    if rng.random() < 0.2:
        a, b = rng.sample(gateways, 2)
        t = rng.randint(0, 100)
        faults.append(FaultSpec(FaultKind.PARTITION, target=f"{a},{b}", at=t))
        faults.append(FaultSpec(FaultKind.HEAL, target=f"{a},{b}", at=t + rng.randint(5, 300)))
    chaos = Chaos(drop=rng.choice([0.0, 0.02, 0.1]), duplicate=rng.choice([0.0, 0.05, 0.15]),
                  delay=rng.choice([0.0, 0.1, 0.3]), max_delay=8)
    return base.replace(name=f"fuzz-{seed}", seed=seed, transfers=specs, faults=faults, chaos=chaos)


@dataclass
class FuzzReport:
    runs: int
    seed: int
    failures: list[dict[str, Any]] = field(default_factory=list)
    outcomes: dict[str, int] = field(default_factory=dict)
    phases: dict[str, int] = field(default_factory=dict)
    determinism_checked: list[int] = field(default_factory=list)
    nondeterministic: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and not self.nondeterministic

    def summary(self) -> str:
        phases = ", ".join(f"{k}={v}" for k, v in sorted(self.phases.items()))
        return (f"{self.runs} runs (seed {self.seed}): {len(self.failures)} with invariant violations,"
                f" {len(self.nondeterministic)}/{len(self.determinism_checked)} spot-checked seeds"
                f" non-deterministic; outcomes {self.outcomes}; origin phases {phases}")


def fuzz(runs: int, seed: int, transfers: int = 10, determinism_spot_checks: int = 10) -> FuzzReport:
    report = FuzzReport(runs=runs, seed=seed)
    seeds = [seed * 1_000_003 + i for i in range(runs)]
    spot = set(random.Random(seed).sample(seeds, min(determinism_spot_checks, runs)))
    for s in seeds:
        scenario = random_scenario(s, transfers)
        trace = run_scenario(scenario)
        report.outcomes[trace.outcome] = report.outcomes.get(trace.outcome, 0) + 1
        for sid in trace.session_ids():
            ph = trace.phases(sid)["ORIGIN"] or "none"
            report.phases[ph] = report.phases.get(ph, 0) + 1
        if not trace.passed:
            report.failures.append({"seed": s, "problems": [str(v) for v in trace.verdicts if not v.passed]})
        if s in spot:
            report.determinism_checked.append(s)
            if run_scenario(random_scenario(s, transfers)).export() != trace.export():
                report.nondeterministic.append(s)
    return report
