"""Global invariant suite, evaluated over a finished execution trace.

1. asset-singleton   a transferred asset is live on at most one network
2. conservation      per profile, live supply plus burned-but-not-yet-minted
                     value equals what was issued
3. status-legality   every ledger log replays through legal transitions
4. write-ahead       every effect is preceded by the WAL entry describing it
5. no-rollback-after-commit
6. chain-integrity   WAL hash chains and per-session message chains verify
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .. import encoding
from ..ledger import AssetStatus, LedgerOp, conservation_problems, replay_records
from ..protocol import Phase, Role, SessionState, TransferProposal, verify_chain
from ..recovery import WalKind, first_break

NAMES = (
    "asset-singleton",
    "conservation",
    "status-legality",
    "write-ahead",
    "no-rollback-after-commit",
    "chain-integrity",
)


@dataclass(frozen=True)
class InvariantVerdict:
    name: str
    passed: bool
    problems: tuple[str, ...] = ()

    def __str__(self) -> str:
        mark = "ok  " if self.passed else "FAIL"
        extra = "" if self.passed else f": {'; '.join(self.problems[:3])}"
        return f"[{mark}] {self.name}{extra}"


def _verdict(name: str, problems: list[str]) -> InvariantVerdict:
    return InvariantVerdict(name, not problems, tuple(problems))


def _proposals(trace) -> dict[str, TransferProposal]:
    out: dict[str, TransferProposal] = {}
    for states in trace.sessions.values():
        for (sid, _), s in states.items():
            if s.proposal is not None:
                out.setdefault(sid, s.proposal)
    return out


def _role_state(trace, sid: str, role: Role) -> SessionState | None:
    for states in trace.sessions.values():
        s = states.get((sid, role))
        if s is not None:
            return s
    return None


def _mints(trace) -> dict[str, list[tuple[str, Any]]]:
    mints: dict[str, list[tuple[str, Any]]] = {}
    for net, records in trace.ledgers.items():
        for r in records:
            if r.op == LedgerOp.MINT.value:
                mints.setdefault(r.session_id, []).append((net, r))
    return mints


def asset_singleton(trace) -> InvariantVerdict:
    problems = []
    replayed = {net: replay_records(records)[0] for net, records in trace.ledgers.items()}
    mints = _mints(trace)
    for sid, found in sorted(mints.items()):
        if len(found) > 1:
            problems.append(f"{sid} minted {len(found)} times")
    for sid, p in sorted(_proposals(trace).items()):
        origin_asset = replayed.get(p.origin_network, {}).get(p.asset_id)
        minted = mints.get(sid, [])
        if minted:
            if any(net != p.destination_network for net, _ in minted):
                problems.append(f"{sid} minted outside {p.destination_network}")
            burned = any(r.op == LedgerOp.BURN.value and r.session_id == sid
                         for r in trace.ledgers.get(p.origin_network, ()))
            if not burned:
                problems.append(f"{sid} minted at {p.destination_network} but never burned at {p.origin_network}")
        if origin_asset is not None and origin_asset.status is AssetStatus.LOCKED \
                and origin_asset.lock_session == sid:
            origin = _role_state(trace, sid, Role.ORIGIN)
            if origin is not None and origin.terminal and not origin.pending:
                problems.append(f"{p.asset_id} still locked by {sid}, which ended {origin.phase.value}")
    return _verdict("asset-singleton", problems)


def conservation(trace) -> InvariantVerdict:
    problems = []
    issued: dict[str, int] = {}
    live: dict[str, int] = {}
    burned: dict[str, tuple[str, int]] = {}
    minted = set(_mints(trace))
    for net, records in sorted(trace.ledgers.items()):
        assets, _ = replay_records(records)
        for r in records:
            if r.op == LedgerOp.ISSUE.value:
                issued[r.profile_id] = issued.get(r.profile_id, 0) + r.amount
            elif r.op == LedgerOp.BURN.value:
                burned[r.session_id] = (r.profile_id, r.amount)
        for a in assets.values():
            if a.status is not AssetStatus.BURNED:
                live[a.profile_id] = live.get(a.profile_id, 0) + a.amount
    in_flight: dict[str, int] = {}
    for sid, (profile, amount) in sorted(burned.items()):
        if sid in minted:
            continue
        dest = _role_state(trace, sid, Role.DESTINATION)
        origin = _role_state(trace, sid, Role.ORIGIN)
        if (dest is not None and dest.terminal) or (origin is not None and origin.phase is Phase.ROLLED_BACK):
            problems.append(f"{sid} burned {amount} {profile} with no mint and no live session")
        in_flight[profile] = in_flight.get(profile, 0) + amount
    for profile in sorted(set(issued) | set(live) | set(in_flight)):
        total = live.get(profile, 0) + in_flight.get(profile, 0)
        if total != issued.get(profile, 0):
            problems.append(f"{profile}: live {live.get(profile, 0)} + in flight {in_flight.get(profile, 0)}"
                            f" != issued {issued.get(profile, 0)}")
    for ledger in getattr(trace, "ledger_objects", {}).values():
        problems.extend(conservation_problems(ledger))
    return _verdict("conservation", problems)


def status_legality(trace) -> InvariantVerdict:
    problems = []
    for net, records in sorted(trace.ledgers.items()):
        problems.extend(f"{net}: {p}" for p in replay_records(records)[1])
    return _verdict("status-legality", problems)


def write_ahead(trace) -> InvariantVerdict:
    problems = []
    intents: dict[tuple[str, str, str, str], int] = {}  # (gateway, session, role, op) -> first order
    sent: dict[tuple[str, bytes], int] = {}
    for gid, entries in trace.wals.items():
        preflight_ok: set[str] = set()
        started: set[tuple[str, str]] = set()
        for e in entries:
            if e.kind == WalKind.INTENT.value:
                op = e.decoded()["op"]
                intents.setdefault((gid, e.session_id, e.role, op), e.order)
            elif e.kind == WalKind.MESSAGE_SENT.value:
                sent.setdefault((gid, e.snapshot), e.order)
            elif e.kind == WalKind.EVIDENCE.value:
                data = e.decoded()
                if "preflight" in data and data["preflight"].get("passed") is True:
                    preflight_ok.add(e.session_id)
            elif e.kind in (WalKind.STATE_TRANSITION.value, WalKind.COMMIT_POINT.value, WalKind.TERMINAL.value):
                if e.role == Role.ORIGIN.value and e.key not in started:
                    started.add(e.key)
                    if e.session_id not in preflight_ok:
                        problems.append(f"{gid}: origin session {e.session_id} started without a passing pre-flight")
    owner = trace.network_owner
    for net, records in sorted(trace.ledgers.items()):
        for r in records:
            if r.session_id is None:
                continue
            role = Role.DESTINATION if r.op == LedgerOp.MINT.value else Role.ORIGIN
            gid = owner.get(net)
            order = intents.get((gid, r.session_id, role.value, r.op))
            if order is None or order > r.order:
                problems.append(f"{net} #{r.seq} {r.op} for {r.session_id} has no prior INTENT at {gid}")
    for m in trace.messages:
        if not m.chained:
            continue
        payload = encoding.unframe(m.raw)
        order = sent.get((m.src, payload))
        if order is None or order > m.order:
            problems.append(f"{m.src} sent {m.msg_type} #{m.seq} of {m.session_id} before logging it")
    return _verdict("write-ahead", problems)


def no_rollback_after_commit(trace) -> InvariantVerdict:
    problems = []
    for gid, entries in trace.wals.items():
        committed: set[tuple[str, str]] = set()
        for e in entries:
            if e.kind == WalKind.COMMIT_POINT.value:
                committed.add(e.key)
            elif e.kind == WalKind.TERMINAL.value and e.key in committed:
                phase = e.decoded()["phase"]
                if phase == Phase.ROLLED_BACK.value:
                    problems.append(f"{gid}: {e.session_id}/{e.role} rolled back after its commit point")
    for gid, states in trace.sessions.items():
        for (sid, role), s in states.items():
            if s.phase is Phase.ROLLED_BACK and s.commit_point_passed:
                problems.append(f"{gid}: {sid}/{role.value} is ROLLED_BACK with commit_point_passed")
    return _verdict("no-rollback-after-commit", problems)


def chain_integrity(trace) -> InvariantVerdict:
    problems = []
    for gid, entries in sorted(trace.wals.items()):
        brk = first_break(entries)
        if brk is not None:
            problems.append(f"{gid}: WAL chain breaks at entry {brk + 1}")
    for gid, states in sorted(trace.sessions.items()):
        for (sid, role), s in sorted(states.items()):
            verdict = verify_chain(s.chain, trace.keys)
            if not verdict:
                problems.append(f"{gid}: {sid}/{role.value} message chain: {verdict.reason} {verdict.detail}")
    for sid in trace.session_ids():
        o, d = _role_state(trace, sid, Role.ORIGIN), _role_state(trace, sid, Role.DESTINATION)
        if o is not None and d is not None and o.phase is d.phase is Phase.COMPLETED:
            if [m.hash for m in o.chain] != [m.hash for m in d.chain]:
                problems.append(f"{sid}: completed chains differ between origin and destination")
    return _verdict("chain-integrity", problems)


CHECKS = (asset_singleton, conservation, status_legality, write_ahead, no_rollback_after_commit, chain_integrity)


def check_global_invariants(trace) -> list[InvariantVerdict]:
    return [check(trace) for check in CHECKS]
