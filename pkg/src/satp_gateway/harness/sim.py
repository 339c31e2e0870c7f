"""Seeded discrete-event execution of a scenario.

Everything runs on one thread under a logical clock. Events due at the same
logical instant are picked in an order drawn from the scenario's seeded RNG,
so (scenario, seed) fully determines the run. A crash discards the gateway
object; its WAL store and the ledgers survive, and a restart rebuilds the
gateway from the WAL alone.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .. import encoding
from ..assets import ProfileRegistry
from ..clock import LogicalClock
from ..config import GatewayConfig, PeerInfo
from ..crypto import KeyPair, KeyRing
from ..gateway import (
    Gateway,
    GatewayCrashed,
    PreFlightFailed,
    TransferRequest,
    UnknownPeer,
    UnservedNetwork,
)
from ..identity import IdentityClient, IdentityProvider
from ..ledger import AssetNetworks, Ledger, LedgerRecord, NetworkId, Visibility
from ..protocol import CONTROL_TYPES, MsgType, Role, SatpMessage, SessionState
from ..recovery import MemoryWalStore, WalEntry, WriteAheadLog, recover
from .scenario import FaultKind, FaultSpec, Scenario

QUIESCENT = "QUIESCENT"
NON_QUIESCENT = "NON_QUIESCENT"
IDP_ID = "IDP"


class NonQuiescent(Exception):
    """Budget exhausted with events still pending. Reported in the trace
    outcome; raised only by callers that ask for it."""


def gateway_key(gateway_id: str, seed: str | None = None) -> KeyPair:
    return KeyPair.from_seed(gateway_id, seed or f"gateway-{gateway_id}")


def network_key(network_id: str) -> KeyPair:
    return KeyPair.from_seed(network_id, f"network-{network_id}")


def idp_key() -> KeyPair:
    return KeyPair.from_seed(IDP_ID, "identity-provider")


@dataclass(frozen=True)
class SentMessage:
    order: int
    time: int
    src: str
    dst: str
    msg_type: str
    session_id: str
    seq: int
    raw: bytes

    @property
    def chained(self) -> bool:
        return MsgType(self.msg_type) not in CONTROL_TYPES


@dataclass
class ExecutionTrace:
    scenario: str
    seed: int
    outcome: str
    end_time: int
    events: list[dict[str, Any]]
    messages: list[SentMessage]
    ledgers: dict[str, tuple[LedgerRecord, ...]]
    wals: dict[str, tuple[WalEntry, ...]]
    sessions: dict[str, dict[tuple[str, Role], SessionState]]
    submissions: dict[int, dict[str, Any]]
    anchors: list[tuple[str, str]]
    keys: KeyRing
    network_owner: dict[str, str]
    ledger_objects: dict[str, Ledger] = field(default_factory=dict, repr=False)
    gateway_objects: dict[str, Gateway | None] = field(default_factory=dict, repr=False)
    verdicts: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def state(self, gateway_id: str, session_id: str, role: Role) -> SessionState | None:
        return self.sessions.get(gateway_id, {}).get((session_id, role))

    def session_ids(self) -> list[str]:
        return sorted({k[0] for states in self.sessions.values() for k in states})

    def phases(self, session_id: str) -> dict[str, str | None]:
        """Final phase per role, looked up at whichever gateway holds it."""
        out: dict[str, str | None] = {"ORIGIN": None, "DESTINATION": None}
        for states in self.sessions.values():
            for role in Role:
                s = states.get((session_id, role))
                if s is not None:
                    out[role.value] = s.phase.value
        return out

    def parked(self) -> list[tuple[str, str, str]]:
        return sorted((gid, k[0], k[1].value) for gid, states in self.sessions.items()
                      for k, s in states.items() if s.parked)

    def export(self) -> bytes:
        """Canonical newline-delimited trace; byte-identical for equal runs."""
        records: list[dict[str, Any]] = [{
            "type": "trace", "scenario": self.scenario, "seed": self.seed,
            "outcome": self.outcome, "end_time": self.end_time,
        }]
        records += [{"type": "event", **e} for e in self.events]
        records += [{"type": "message", "order": m.order, "time": m.time, "src": m.src,
                     "dst": m.dst, "raw": m.raw} for m in self.messages]
        for net in sorted(self.ledgers):
            records += [{"type": "ledger", "network": net, **r.to_dict()} for r in self.ledgers[net]]
        for gid in sorted(self.wals):
            records += [{"type": "wal", "gateway": gid, **e.to_dict()} for e in self.wals[gid]]
        for gid in sorted(self.sessions):
            for (sid, role), s in sorted(self.sessions[gid].items()):
                records.append({"type": "session", "gateway": gid, "session_id": sid, "role": role.value,
                                "phase": s.phase.value, "parked": s.parked,
                                "commit_point_passed": s.commit_point_passed})
        records += [{"type": "verdict", "name": v.name, "passed": v.passed, "problems": list(v.problems)}
                    for v in self.verdicts]
        return encoding.dump_lines(records)


class SimTransport:
    def __init__(self, sim: "Simulation"):
        self.sim = sim

    def send(self, src: str, dst: str, data: bytes) -> None:
        self.sim._on_send(src, dst, data)


class Simulation:
    def __init__(self, scenario: Scenario, check: bool = True):
        self.sc = scenario
        self.check = check
        self.rng = random.Random(scenario.seed)
        self.clock = LogicalClock()
        self.registry = ProfileRegistry(scenario.profiles)
        self.owner = scenario.network_owner()

        notaries = {n.id: network_key(n.id) for n in scenario.networks}
        self.network_keys = {nid: kp.public for nid, kp in notaries.items()}
        self.ledgers = AssetNetworks()
        for n in scenario.networks:
            readers = [self.owner[n.id]] if n.id in self.owner else []
            ledger = Ledger(NetworkId(n.id, Visibility(n.visibility)), self.registry, notaries[n.id],
                            trusted_keys=self.network_keys, readers=readers, clock=self.clock)
            for a in n.assets:
                ledger.issue_asset(a["profile_id"], a["owner"], a["amount"])
            self.ledgers[n.id] = ledger

        ident = scenario.identity
        self.idp_key = idp_key()
        self.idp = IdentityProvider(self.idp_key, ident.get("verdicts", {}), online=ident.get("online", True),
                                    ttl=ident.get("ttl", 1000), clock=self.clock,
                                    default=ident.get("default", "VERIFIED"))

        gkeys = {g.gateway_id: gateway_key(g.gateway_id, g.key_seed) for g in scenario.gateways}
        self.configs: dict[str, GatewayConfig] = {}
        for g in scenario.gateways:
            peers = {o: PeerInfo(k.public, f"sim://{o}") for o, k in gkeys.items() if o != g.gateway_id}
            self.configs[g.gateway_id] = GatewayConfig(
                gateway_id=g.gateway_id, key=gkeys[g.gateway_id], served_networks=list(g.served_networks),
                peers=peers, network_keys=dict(self.network_keys), idp_id=IDP_ID,
                idp_public_key=self.idp_key.public, timeouts=g.timeouts,
            )
        self.keys = KeyRing({**{g: k.public for g, k in gkeys.items()}, **self.network_keys,
                             IDP_ID: self.idp_key.public})

        self.transport = SimTransport(self)
        self.stores = {gid: MemoryWalStore() for gid in self.configs}
        self.gateways: dict[str, Gateway | None] = {gid: None for gid in self.configs}
        self.incarnation = {gid: 0 for gid in self.configs}
        self._queue: list = []
        self._counter = itertools.count()
        self._tick_at: dict[str, int] = {}
        self.partitions: set[tuple[str, str]] = set()
        self.events: list[dict[str, Any]] = []
        self.messages: list[SentMessage] = []
        self.anchors: list[tuple[str, str]] = []
        self._anchor_counts: dict[tuple[str, str], int] = {}
        self._fired: set[int] = set()
        self._fault_left = {i: f.count for i, f in enumerate(scenario.faults) if f.message_fault}
        self._restart_after: dict[str, int | None] = {}
        self.submissions: dict[int, dict[str, Any]] = {}
        self._waiting: dict[int, int] = {}  # transfer index -> first attempt time
        self._resumed = False

    # -- scheduling -------------------------------------------------------

    def _push(self, t: int, event: tuple) -> None:
        heapq.heappush(self._queue, (t, next(self._counter), event))

    def _pop(self) -> tuple[int, tuple]:
        t = self._queue[0][0]
        batch = []
        while self._queue and self._queue[0][0] == t:
            batch.append(heapq.heappop(self._queue))
        chosen = batch.pop(self.rng.randrange(len(batch)))
        for item in batch:
            heapq.heappush(self._queue, item)
        return t, chosen[2]

    def _log(self, kind: str, **detail) -> None:
        self.events.append({"t": self.clock.now, "kind": kind, **detail})

    def _schedule_ticks(self) -> None:
        for gid, gw in self.gateways.items():
            if gw is None:
                continue
            d = gw.next_deadline()
            if d is None:
                continue
            d = max(d, self.clock.now)
            if self._tick_at.get(gid) != d:
                self._tick_at[gid] = d
                self._push(d, ("tick", gid, self.incarnation[gid]))

    # -- gateway lifecycle ----------------------------------------------------

    def _guard(self, gid: str, fn: Callable[[], Any]) -> Any:
        try:
            return fn()
        except GatewayCrashed as crash:
            self._crash(gid, str(crash))
            return None

    def _crash(self, gid: str, reason: str) -> None:
        self.gateways[gid] = None
        self.incarnation[gid] += 1
        self._tick_at.pop(gid, None)
        self._log("crash", gateway=gid, reason=reason)
        after = self._restart_after.pop(gid, None)
        if after is not None:
            self._push(self.clock.now + after, ("restart", gid))

    def _boot(self, gid: str) -> None:
        if self.gateways[gid] is not None:
            return
        self._log("boot", gateway=gid)
        cfg = self.configs[gid]
        identity = IdentityClient(self.idp, self.idp_key.public, self.clock)

        def build():
            gw = Gateway(cfg, {n: self.ledgers[n] for n in cfg.served_networks}, self.registry, identity,
                         self.clock, WriteAheadLog(self.stores[gid], self.clock), self.transport,
                         anchor_hook=self._hook, duplicate_ledger_calls=self.sc.duplicate_ledger_calls)
            self.gateways[gid] = gw
            return gw

        if self._guard(gid, build) is None:
            return
        for idx, first in sorted(self._waiting.items()):
            if self.sc.transfers[idx].gateway == gid:
                del self._waiting[idx]
                if self.clock.now - first <= self.sc.client_patience:
                    self._push(self.clock.now, ("transfer", idx))
                else:
                    self.submissions[idx] = {"status": "abandoned"}
                    self._log("abandoned", transfer=idx)

    def _hook(self, gid: str, name: str) -> None:
        n = self._anchor_counts.get((gid, name), 0) + 1
        self._anchor_counts[(gid, name)] = n
        full = f"{name}#{n}"
        self.anchors.append((gid, full))
        for i, f in enumerate(self.sc.faults):
            if f.kind is FaultKind.CRASH_GATEWAY and f.anchor and i not in self._fired and f.target == gid:
                if f.anchor == full or (f.anchor == name and n == 1):
                    self._fired.add(i)
                    self._restart_after[gid] = f.restart_after
                    raise GatewayCrashed(full)

    # -- transport ---------------------------------------------------------------

    def _partitioned(self, a: str, b: str) -> bool:
        return tuple(sorted((a, b))) in self.partitions

    def _on_send(self, src: str, dst: str, data: bytes) -> None:
        msg = SatpMessage.decode(encoding.unframe(data))
        sent = SentMessage(self.clock.next_order(), self.clock.now, src, dst, msg.msg_type.value,
                           msg.session_id, msg.seq, data)
        self.messages.append(sent)
        copies, extra = 1, 0
        for i, f in enumerate(self.sc.faults):
            if self._fault_left.get(i, 0) > 0 and f.matches(src, dst, sent.msg_type, sent.session_id, sent.seq):
                self._fault_left[i] -= 1
                if f.kind is FaultKind.DROP_MESSAGE:
                    copies = 0
                elif f.kind is FaultKind.DUPLICATE_MESSAGE:
                    copies += 1
                else:
                    extra += f.delay
        chaos = self.sc.chaos
        if chaos.drop and self.rng.random() < chaos.drop:
            copies = 0
        if chaos.duplicate and self.rng.random() < chaos.duplicate:
            copies += 1
        if chaos.delay and self.rng.random() < chaos.delay:
            extra += self.rng.randint(1, chaos.max_delay)
        if self.sc.duplicate_delivery:
            copies *= 2
        if copies == 0:
            self._log("drop", order=sent.order)
        for c in range(copies):
            self._push(self.clock.now + self.sc.latency + extra + c, ("deliver", src, dst, data, sent.order))

    # -- events -------------------------------------------------------------------

    def _dispatch(self, event: tuple) -> None:
        kind = event[0]
        if kind == "deliver":
            _, src, dst, data, order = event
            gw = self.gateways.get(dst)
            if gw is None or self._partitioned(src, dst):
                self._log("lost", order=order, dst=dst)
                return
            ack = self._guard(dst, lambda: gw.api2_receive_message(data))
            if ack is not None and not ack.ok:
                self._log("nack", order=order, error=ack.error)
        elif kind == "tick":
            _, gid, inc = event
            if self._tick_at.get(gid) == self.clock.now:
                del self._tick_at[gid]
            gw = self.gateways.get(gid)
            if gw is not None and inc == self.incarnation[gid]:
                self._guard(gid, gw.tick)
        elif kind == "transfer":
            self._submit(event[1])
        elif kind == "restart":
            self._boot(event[1])
        elif kind == "fault":
            self._fault(event[1])
        else:  # pragma: no cover
            raise ValueError(kind)

    def _submit(self, idx: int) -> None:
        spec = self.sc.transfers[idx]
        data = dict(spec.request)
        data.setdefault("request_id", None)
        if not data["request_id"]:
            data["request_id"] = f"tx{idx}"
        request = TransferRequest.from_dict(data)
        gw = self.gateways.get(spec.gateway)
        if gw is None:
            self._waiting.setdefault(idx, self.clock.now)
            return
        first = self._waiting.pop(idx, self.clock.now)
        try:
            sid = gw.api1_initiate_transfer(request)
        except GatewayCrashed as crash:
            self._waiting[idx] = first
            self._crash(spec.gateway, str(crash))
            return
        except PreFlightFailed as exc:
            self.submissions[idx] = {"status": "rejected", "codes": list(exc.report.codes)}
            self._log("rejected", transfer=idx, codes=list(exc.report.codes))
            return
        except (UnknownPeer, UnservedNetwork, ValueError) as exc:
            self.submissions[idx] = {"status": "error", "error": type(exc).__name__}
            self._log("request-error", transfer=idx, error=type(exc).__name__)
            return
        self.submissions[idx] = {"status": "submitted", "session_id": sid}
        self._log("submitted", transfer=idx, session_id=sid)

    def _fault(self, idx: int) -> None:
        f: FaultSpec = self.sc.faults[idx]
        self._log("fault", fault=f.kind.value, target=f.target)
        if f.kind is FaultKind.CRASH_GATEWAY:
            if self.gateways[f.target] is not None:
                self._restart_after[f.target] = f.restart_after
                self._crash(f.target, "scheduled")
        elif f.kind is FaultKind.RESTART_GATEWAY:
            self._boot(f.target)
        elif f.kind in (FaultKind.PARTITION, FaultKind.HEAL):
            pair = tuple(sorted(f.target.split(",")))
            if f.kind is FaultKind.PARTITION:
                self.partitions.add(pair)
            else:
                self.partitions.discard(pair)

    # -- main loop -------------------------------------------------------------------

    def run(self) -> ExecutionTrace:
        for gid in sorted(self.configs):
            self._boot(gid)
        for i, t in enumerate(self.sc.transfers):
            self._push(t.at, ("transfer", i))
        for i, f in enumerate(self.sc.faults):
            if f.at is not None and not f.message_fault:
                self._push(f.at, ("fault", i))
        self._schedule_ticks()
        outcome = QUIESCENT
        while True:
            if not self._queue:
                if self.sc.operator_resume and not self._resumed:
                    self._resumed = True
                    self._operator_resume()
                    self._schedule_ticks()
                    if self._queue:
                        continue
                break
            if self._queue[0][0] > self.sc.max_logical_time:
                outcome = NON_QUIESCENT
                break
            t, event = self._pop()
            self.clock.advance_to(t)
            self._dispatch(event)
            self._schedule_ticks()
        return self._trace(outcome)

    def _operator_resume(self) -> None:
        for gid, gw in sorted(self.gateways.items()):
            if gw is None:
                continue
            for sid in sorted({k[0] for k, s in gw.sessions.items() if s.parked}):
                self._log("resume", gateway=gid, session_id=sid)
                self._guard(gid, lambda: gw.resume(sid))

    def _trace(self, outcome: str) -> ExecutionTrace:
        wals = {gid: tuple(store.entries) for gid, store in self.stores.items()}
        sessions = {gid: recover(entries)[0].sessions for gid, entries in wals.items()}
        trace = ExecutionTrace(
            scenario=self.sc.name,
            seed=self.sc.seed,
            outcome=outcome,
            end_time=self.clock.now,
            events=self.events,
            messages=self.messages,
            ledgers={nid: ledger.records for nid, ledger in sorted(self.ledgers.items())},
            wals=wals,
            sessions=sessions,
            submissions=self.submissions,
            anchors=self.anchors,
            keys=self.keys,
            network_owner=dict(self.owner),
            ledger_objects=dict(self.ledgers),
            gateway_objects=dict(self.gateways),
        )
        if self.check:
            from .invariants import check_global_invariants
            trace.verdicts = check_global_invariants(trace)
        return trace


def run_scenario(scenario: Scenario, check: bool = True) -> ExecutionTrace:
    return Simulation(scenario, check=check).run()
