"""Gateway runtime: binds the protocol core, the WAL, the identity client and
one or more ledgers into a single service node.

The runtime is transport-agnostic. Outbound frames go through
``transport.send(src, dst, frame)``; the harness supplies an in-process
queue and live mode an HTTP client. Time comes from a shared
``LogicalClock``; whoever drives the clock calls ``tick()`` so retries fire.

Crash instrumentation: ``anchor_hook(gateway_id, name)`` is called at every
message receive, WAL write, message send and ledger call. A hook that raises
``GatewayCrashed`` simulates a crash at exactly that point.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, replace
from typing import Any, Callable, Mapping

from . import encoding
from .assets import ProfileRegistry, TravelRulePayload, ValidationReport
from .clock import LogicalClock
from .config import GatewayConfig
from .crypto import ZERO_HASH, KeyRing, digest, verify
from .identity import IdentityClient
from .ledger import Ledger, LedgerError, LedgerOp, UnknownAsset
from .protocol import (
    CONTROL_TYPES,
    SENT_BY,
    InvalidSignature,
    MsgType,
    Phase,
    ProtocolError,
    Role,
    SatpMessage,
    SessionState,
    StepContext,
    TransferProposal,
    Trigger,
    TriggerKind,
    TRIGGER_FOR_OP,
    UnexpectedMessage,
    new_destination_session,
    new_origin_session,
    recipient_role,
    step,
)
from .recovery import (
    WalKind,
    WriteAheadLog,
    handle_recovery_request,
    recover,
    recovery_request,
)

log = logging.getLogger(__name__)

BUNDLE_SCHEMA = "satp-bundle/1"
BUNDLE_SEAL_DOMAIN = b"satp.bundle.v1"
# WAL kinds whose snapshot is kept in exported bundles; the rest are elided
_BUNDLE_KEEP = frozenset({WalKind.MESSAGE_SENT.value, WalKind.MESSAGE_RECEIVED.value,
                          WalKind.EVIDENCE.value, WalKind.INTENT.value})


class GatewayCrashed(BaseException):
    """Raised by an anchor hook to simulate a crash. BaseException so that
    no ``except Exception`` inside the runtime can swallow it."""


class PreFlightFailed(Exception):
    def __init__(self, report: ValidationReport):
        super().__init__(", ".join(report.codes) or "pre-flight failed")
        self.report = report


class UnknownPeer(Exception):
    pass


class UnservedNetwork(Exception):
    pass


class UnknownSession(KeyError):
    pass


class IsolationViolation(AssertionError):
    pass


@dataclass(frozen=True)
class TransferRequest:
    origin_network: str
    asset_id: str
    amount: int
    destination_network: str
    destination_gateway: str
    beneficiary: str
    travel_rule: TravelRulePayload
    request_id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "origin_network": self.origin_network,
            "asset_id": self.asset_id,
            "amount": self.amount,
            "destination_network": self.destination_network,
            "destination_gateway": self.destination_gateway,
            "beneficiary": self.beneficiary,
            "travel_rule": self.travel_rule.to_dict(),
            "request_id": self.request_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TransferRequest":
        try:
            amount = data["amount"]
            if isinstance(amount, bool) or not isinstance(amount, int):
                raise TypeError("amount must be an integer")
            return cls(
                origin_network=str(data["origin_network"]),
                asset_id=str(data["asset_id"]),
                amount=amount,
                destination_network=str(data["destination_network"]),
                destination_gateway=str(data["destination_gateway"]),
                beneficiary=str(data["beneficiary"]),
                travel_rule=TravelRulePayload.from_dict(data.get("travel_rule") or {}),
                request_id=data.get("request_id"),
            )
        except KeyError as exc:
            raise ValueError(f"missing field {exc}") from exc


@dataclass(frozen=True)
class Ack:
    ok: bool
    seq: int | None = None
    error: str | None = None
    detail: str = ""
    ignored: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "seq": self.seq, "error": self.error,
                "detail": self.detail, "ignored": self.ignored}


@dataclass(frozen=True)
class CommandRecord:
    """One executed ledger command, kept for the isolation check."""
    session_id: str
    role: str
    network: str
    op: str


class NullTransport:
    def send(self, src: str, dst: str, data: bytes) -> None:
        pass


class Gateway:
    def __init__(
        self,
        config: GatewayConfig,
        ledgers: Mapping[str, Ledger],
        registry: ProfileRegistry,
        identity: IdentityClient,
        clock: LogicalClock,
        wal: WriteAheadLog,
        transport=None,
        anchor_hook: Callable[[str, str], None] | None = None,
        duplicate_ledger_calls: bool = False,
    ):
        missing = [n for n in config.served_networks if n not in ledgers]
        if missing:
            raise ValueError(f"{config.gateway_id}: no ledger binding for {missing}")
        self.config = config
        self.id = config.gateway_id
        self.key = config.key
        self.served = frozenset(config.served_networks)
        self.ledgers = {n: ledgers[n] for n in config.served_networks}
        self.registry = registry
        self.identity = identity
        self.clock = clock
        self.wal = wal
        self.transport = transport or NullTransport()
        self.anchor_hook = anchor_hook
        self.duplicate_ledger_calls = duplicate_ledger_calls
        self.timeouts = config.timeouts
        self.keys = KeyRing(config.public_keys())
        self.sessions: dict[tuple[str, Role], SessionState] = {}
        self.preflight: dict[str, dict] = {}
        self.updated: dict[tuple[str, Role], int] = {}
        self.command_log: list[CommandRecord] = []
        self._attempts: dict[tuple[str, Role], int] = {}
        self._due: dict[tuple[str, Role], int] = {}
        self._lock = threading.RLock()
        self.ctx = StepContext(
            key=self.key,
            keys=self.keys,
            profiles={p.canonical_hash: p.profile_id for p in registry},
            served_networks=self.served,
            attest=self.identity.verdict,
        )
        if len(self.wal):
            self._restart()

    # -- instrumentation ----------------------------------------------------

    def _anchor(self, name: str) -> None:
        if self.anchor_hook is not None:
            self.anchor_hook(self.id, name)

    def _wal(self, key: tuple[str, Role], kind: WalKind, snapshot: bytes, detail: str) -> None:
        self.wal.append(key[0], key[1], kind, snapshot)
        self._anchor(f"wal:{kind.value}:{detail}")

    # -- API1 -----------------------------------------------------------------

    def _check_request(self, request: TransferRequest) -> None:
        if request.origin_network not in self.served:
            raise UnservedNetwork(f"{self.id} does not serve {request.origin_network}")
        if request.destination_gateway != self.id and request.destination_gateway not in self.config.peers:
            raise UnknownPeer(request.destination_gateway)

    def _build_proposal(self, request: TransferRequest, session_id: str) -> TransferProposal:
        ledger = self.ledgers[request.origin_network]
        try:
            asset = ledger.get_asset(request.asset_id)
            profile_hash = (self.registry.get(asset.profile_id).canonical_hash
                            if asset.profile_id in self.registry else ZERO_HASH)
        except UnknownAsset:
            profile_hash = ZERO_HASH
        return TransferProposal(
            session_id=session_id,
            origin_gateway=self.id,
            destination_gateway=request.destination_gateway,
            origin_network=request.origin_network,
            destination_network=request.destination_network,
            asset_id=request.asset_id,
            profile_hash=profile_hash,
            amount=request.amount,
            beneficiary=request.beneficiary,
            travel_rule=request.travel_rule,
            lock_expiry=self.clock.now + self.timeouts.lock_window,
            proposal_nonce=digest(f"{self.id}|{session_id}".encode())[:16],
        )

    def _preflight(self, proposal: TransferProposal) -> ValidationReport:
        parties = [proposal.travel_rule.originator_account, proposal.beneficiary]
        attestations = {p: self.identity.verdict(p) for p in parties if p and p.strip()}
        return self.ledgers[proposal.origin_network].pre_flight_check(proposal, attestations)

    def api1_pre_flight(self, request: TransferRequest) -> ValidationReport:
        """Dry run: validation only, nothing is logged or locked."""
        with self._lock:
            self._check_request(request)
            return self._preflight(self._build_proposal(request, f"{self.id}/dry-run"))

    def _new_session_id(self, request: TransferRequest) -> str:
        if request.request_id:
            return f"{self.id}/{request.request_id}"
        n = len(self.preflight) + 1
        while f"{self.id}/t{n:05d}" in self.preflight:
            n += 1
        return f"{self.id}/t{n:05d}"

    def api1_initiate_transfer(self, request: TransferRequest) -> str:
        with self._lock:
            self._check_request(request)
            session_id = self._new_session_id(request)
            if (session_id, Role.ORIGIN) in self.sessions:
                return session_id  # resubmitted request
            proposal = self._build_proposal(request, session_id)
            report = self._preflight(proposal)
            key = (session_id, Role.ORIGIN)
            self.preflight[session_id] = report.to_dict()
            self._wal(key, WalKind.EVIDENCE, encoding.encode({"preflight": report.to_dict()}), "PREFLIGHT")
            if not report.passed:
                raise PreFlightFailed(report)
            self._apply(new_origin_session(proposal), Trigger(TriggerKind.START))
            return session_id

    def api1_get_status(self, session_id: str) -> dict[str, Any]:
        with self._lock:
            roles = [r for r in Role if (session_id, r) in self.sessions]
            if not roles:
                raise UnknownSession(session_id)
            state = self.sessions[(session_id, roles[0])]
            return {
                "session_id": session_id,
                "role": state.role.value,
                "roles": [r.value for r in roles],
                "phase": state.phase.value,
                "last_update": self.updated.get(state.key, 0),
                "terminal": state.terminal,
                "parked": state.parked,
                "commit_point_passed": state.commit_point_passed,
                "evidence": {op: {"network": r.network, "ledger_seq": r.ledger_seq}
                             for op, r in sorted(state.evidence.items())},
                "reasons": list(state.reasons),
            }

    # -- API2 -----------------------------------------------------------------

    def api2_receive_message(self, raw: bytes) -> Ack:
        """Total over byte inputs: every outcome is an ``Ack``."""
        try:
            msg = SatpMessage.decode(encoding.unframe(raw))
        except encoding.DecodeError as exc:
            return Ack(False, error="DecodeError", detail=str(exc))
        self._anchor(f"recv:{msg.msg_type.value}")
        with self._lock:
            try:
                if msg.msg_type in CONTROL_TYPES:
                    self._receive_control(msg)
                    return Ack(True, seq=0)
                return self._receive_chained(msg)
            except UnexpectedMessage as exc:
                return Ack(True, seq=msg.seq, error=exc.reason, detail=str(exc), ignored=True)
            except ProtocolError as exc:
                log.info("%s rejected %r: %s", self.id, msg, exc)
                return Ack(False, seq=msg.seq, error=exc.reason, detail=str(exc))

    def _receive_chained(self, msg: SatpMessage) -> Ack:
        key = (msg.session_id, recipient_role(msg.msg_type))
        state = self.sessions.get(key)
        if state is None:
            if msg.msg_type is not MsgType.PROPOSAL:
                raise UnexpectedMessage(f"{msg.msg_type.value} for unknown session {msg.session_id}")
            state = new_destination_session(msg)
        self._apply(state, msg)
        return Ack(True, seq=msg.seq)

    def _receive_control(self, msg: SatpMessage) -> None:
        if not verify(self.keys.get(msg.sender), msg.signing_bytes(), msg.signature):
            raise InvalidSignature(f"control message from {msg.sender}")
        try:
            role = Role(msg.payload.get("role"))
        except ValueError as exc:
            raise UnexpectedMessage(f"bad role in {msg.msg_type.value}") from exc
        state = self.sessions.get((msg.session_id, role))
        if state is not None and msg.sender != state.peer_gateway:
            raise UnexpectedMessage(f"{msg.sender} is not the peer of {msg.session_id}")

        if msg.msg_type is MsgType.RECOVERY_REQUEST:
            reply = handle_recovery_request(state, msg, self.key)
            self._send_raw(msg.sender, reply)
            # the peer is ahead of us: ask for what we are missing
            if state is not None and not state.terminal and msg.payload.get("last_seq", 0) > state.last_seq:
                self._send_raw(msg.sender, recovery_request(state, self.key))
            return

        # RECOVERY_UPDATE
        if state is None:
            return
        if msg.payload.get("unknown") is True:
            # WALs are durable, so "unknown" after the peer has spoken in this
            # session is a stale answer that raced the proposal; otherwise the
            # peer never saw the proposal and we hand it over again
            if not state.terminal and not any(m.sender == msg.sender for m in state.chain):
                tail = state.chain[-1] if state.chain else None
                if tail is not None and tail.sender == self.id:
                    self._send(state, tail)
            return
        for raw in msg.payload.get("messages", []):
            try:
                inner = SatpMessage.decode(raw)
                if inner.session_id != msg.session_id or recipient_role(inner.msg_type) is not role:
                    continue
                current = self.sessions.get((msg.session_id, role))
                if current is not None and any(m.hash == inner.hash for m in current.chain):
                    continue
                self._receive_chained(inner)
            except (encoding.DecodeError, TypeError, ProtocolError) as exc:
                log.debug("%s skipped recovered message: %s", self.id, exc)

    # -- the write-ahead step ---------------------------------------------------

    def _apply(self, state: SessionState, event: SatpMessage | Trigger) -> SessionState:
        key = state.key
        new, messages, commands = step(state, event, self.ctx)
        if new.parked:
            new = replace(new, parked=False)
        if isinstance(event, SatpMessage):
            self._wal(key, WalKind.MESSAGE_RECEIVED, event.encoded, event.msg_type.value)
        # outbound messages are logged before the state that contains them, so
        # any message a recovered state may retransmit is already in the log
        for m in messages:
            self._wal(key, WalKind.MESSAGE_SENT, m.encoded, m.msg_type.value)
        if new.commit_point_passed and not state.commit_point_passed:
            kind = WalKind.COMMIT_POINT
        elif new.terminal and not state.terminal:
            kind = WalKind.TERMINAL
        else:
            kind = WalKind.STATE_TRANSITION
        self._wal(key, kind, new.encode(), new.phase.value)
        self.sessions[key] = new
        self.updated[key] = self.clock.now
        for c in commands:
            self._wal(key, WalKind.INTENT, encoding.encode(c.to_dict()), c.op)
        self._progress(new)
        for m in messages:
            self._send(new, m)
        for c in commands:
            self._execute(key, c)
        return self.sessions[key]

    def _send(self, state: SessionState, msg: SatpMessage) -> None:
        self.transport.send(self.id, state.peer_gateway, encoding.frame(msg.encoded))
        self._anchor(f"send:{msg.msg_type.value}")

    def _send_raw(self, dst: str, msg: SatpMessage) -> None:
        self.transport.send(self.id, dst, encoding.frame(msg.encoded))

    def _check_isolation(self, state: SessionState, cmd) -> None:
        p = state.proposal
        expected = p.origin_network if state.role is Role.ORIGIN else p.destination_network
        if cmd.network != expected or cmd.session_id != state.session_id or cmd.network not in self.served:
            raise IsolationViolation(f"{cmd.op} on {cmd.network} for {state.session_id}/{state.role.value}")

    def _call_ledger(self, cmd) -> Any:
        ledger = self.ledgers[cmd.network]
        if cmd.op == LedgerOp.LOCK.value:
            return ledger.lock_asset(cmd.asset_id, cmd.session_id, cmd.expiry)
        if cmd.op == LedgerOp.UNLOCK.value:
            return ledger.unlock_asset(cmd.asset_id, cmd.session_id)
        if cmd.op == LedgerOp.BURN.value:
            return ledger.burn_asset(cmd.asset_id, cmd.session_id)
        if cmd.op == LedgerOp.MINT.value:
            return ledger.mint_asset(cmd.profile_id, cmd.amount, cmd.beneficiary, cmd.session_id,
                                     cmd.origin_network, cmd.burn_evidence)
        raise ValueError(f"unknown ledger op {cmd.op}")

    def _execute(self, key: tuple[str, Role], cmd) -> None:
        state = self.sessions[key]
        self._check_isolation(state, cmd)
        self.command_log.append(CommandRecord(cmd.session_id, key[1].value, cmd.network, cmd.op))
        try:
            receipt = self._call_ledger(cmd)
            if self.duplicate_ledger_calls:
                again = self._call_ledger(cmd)
                assert again == receipt, "ledger command is not idempotent"
        except LedgerError as exc:
            self._anchor(f"ledger:{cmd.op}")
            self._ledger_failed(key, cmd, exc)
            return
        self._anchor(f"ledger:{cmd.op}")
        self._wal(key, WalKind.EVIDENCE, encoding.encode({"op": cmd.op, "receipt": receipt.to_dict()}), cmd.op)
        self._apply(self.sessions[key], Trigger(TRIGGER_FOR_OP[cmd.op], receipt))

    def _ledger_failed(self, key, cmd, exc: Exception) -> None:
        state = self.sessions[key]
        reason = type(exc).__name__
        log.info("%s: %s on %s failed for %s: %s", self.id, cmd.op, cmd.network, key[0], exc)
        try:
            self._apply(state, Trigger(TriggerKind.LEDGER_FAILED, reason=reason))
        except UnexpectedMessage:
            # not compensable here (e.g. a failed mint): wait for an operator
            self._park(key)

    # -- retries, parking, operator actions ------------------------------------

    def _progress(self, state: SessionState) -> None:
        key = state.key
        self._attempts[key] = 0
        if state.terminal and not state.pending:
            self._due.pop(key, None)
        else:
            self._due[key] = self.clock.now + self.timeouts.delay(0)

    def _park(self, key) -> None:
        state = replace(self.sessions[key], parked=True)
        self._wal(key, WalKind.STATE_TRANSITION, state.encode(), "PARKED")
        self.sessions[key] = state
        self.updated[key] = self.clock.now
        self._due.pop(key, None)
        log.warning("%s parked %s/%s in %s", self.id, key[0], key[1].value, state.phase.value)

    def _lock_expired(self, state: SessionState) -> bool:
        return (state.role is Role.ORIGIN and not state.commit_point_passed
                and state.phase in (Phase.PROPOSED, Phase.LOCKED, Phase.LOCK_VERIFIED)
                and self.clock.now >= state.proposal.lock_expiry)

    def next_deadline(self) -> int | None:
        with self._lock:
            return min(self._due.values(), default=None)

    def tick(self) -> None:
        """Fire every retry timer that is due at the current logical time."""
        with self._lock:
            due = sorted(k for k, t in self._due.items() if t <= self.clock.now)
            for key in due:
                if self._due.get(key, self.clock.now + 1) <= self.clock.now:
                    del self._due[key]
                    self._on_timer(key)

    def _on_timer(self, key) -> None:
        state = self.sessions[key]
        if state.parked or (state.terminal and not state.pending):
            return
        if self._lock_expired(state):
            self._apply(state, Trigger(TriggerKind.TIMEOUT, reason="LOCK_EXPIRED"))
            return
        attempt = self._attempts.get(key, 0) + 1
        if attempt > self.timeouts.retry_cap:
            if state.role is Role.ORIGIN and not state.commit_point_passed and not state.terminal:
                try:
                    self._apply(state, Trigger(TriggerKind.TIMEOUT, reason="RETRY_CAP"))
                    return
                except UnexpectedMessage:
                    pass
            self._park(key)
            return
        self._attempts[key] = attempt
        self._due[key] = self.clock.now + self.timeouts.delay(attempt)
        self._retry(state)

    def _retry(self, state: SessionState) -> None:
        for cmd in state.pending:
            self._execute(state.key, cmd)
            state = self.sessions[state.key]
            if state.pending and cmd in state.pending:
                break
        if state.terminal:
            return
        if state.chain and state.chain[-1].sender == self.id and state.chain[-1].msg_type in SENT_BY[state.role]:
            self._send(state, state.chain[-1])
        self._send_raw(state.peer_gateway, recovery_request(state, self.key))

    def resume(self, session_id: str) -> list[dict[str, Any]]:
        """Operator retry for parked sessions; returns the new statuses."""
        with self._lock:
            keys = [(session_id, r) for r in Role if (session_id, r) in self.sessions]
            if not keys:
                raise UnknownSession(session_id)
            for key in keys:
                state = self.sessions[key]
                if state.parked:
                    state = replace(state, parked=False)
                    self._wal(key, WalKind.STATE_TRANSITION, state.encode(), "RESUMED")
                    self.sessions[key] = state
                if not state.terminal or state.pending:
                    self._attempts[key] = 0
                    self._due[key] = self.clock.now + self.timeouts.delay(0)
                    self._retry(state)
            return [self._status_for(k) for k in keys]

    def _status_for(self, key) -> dict[str, Any]:
        s = self.sessions[key]
        return {"session_id": s.session_id, "role": s.role.value, "phase": s.phase.value,
                "parked": s.parked, "terminal": s.terminal}

    # -- restart ----------------------------------------------------------------

    def _restart(self) -> None:
        recovered, _ = recover(self.wal.entries)
        self.sessions = dict(recovered.sessions)
        self.preflight = dict(recovered.preflight)
        for key in self.sessions:
            self.updated[key] = self.clock.now
        with self._lock:
            for key, receipt in recovered.unapplied_evidence:
                self._apply(self.sessions[key], Trigger(TRIGGER_FOR_OP[receipt.op], receipt))
            for key, cmd in recovered.pending_intents:
                state = self.sessions[key]
                if cmd not in state.pending:
                    continue
                self._wal(key, WalKind.INTENT, encoding.encode(cmd.to_dict()), cmd.op)
                self._execute(key, cmd)
            for key in sorted(self.sessions):
                state = self.sessions[key]
                if state.terminal and not state.pending:
                    # the final message may have died with us; resending is harmless
                    if state.chain and state.chain[-1].sender == self.id:
                        self._send(state, state.chain[-1])
                    continue
                if state.parked:
                    # a restart is a fresh chance; the flag clears on progress
                    self.sessions[key] = state = replace(state, parked=False)
                if self._lock_expired(state):
                    self._apply(state, Trigger(TriggerKind.TIMEOUT, reason="LOCK_EXPIRED"))
                    state = self.sessions[key]
                    if state.terminal and not state.pending:
                        continue
                self._attempts[key] = 0
                self._due[key] = self.clock.now + self.timeouts.delay(0)
                if state.chain and state.chain[-1].sender == self.id:
                    self._send(state, state.chain[-1])
                self._send_raw(state.peer_gateway, recovery_request(state, self.key))

    # -- export -----------------------------------------------------------------

    def export_transaction_history(self, party: str | None = None, session: str | None = None,
                                   network: str | None = None,
                                   time_range: tuple[int, int] | None = None) -> bytes:
        """Self-contained, sealed evidence bundle (newline-delimited canonical records)."""
        with self._lock:
            entries = self.wal.entries
            selected = []
            for key, state in sorted(self.sessions.items()):
                p = state.proposal
                if session is not None and key[0] != session:
                    continue
                if network is not None and network not in (p.origin_network, p.destination_network):
                    continue
                if party is not None and party not in (p.travel_rule.originator_account, p.beneficiary,
                                                       p.travel_rule.beneficiary_account):
                    continue
                if time_range is not None:
                    lo, hi = time_range
                    if not any(lo <= e.timestamp <= hi for e in entries if e.key == (key[0], key[1].value)):
                        continue
                selected.append(key)

            records: list[dict[str, Any]] = [{
                "type": "header",
                "schema": BUNDLE_SCHEMA,
                "exporter": self.id,
                "filter": {"party": party, "session": session, "network": network,
                           "time_range": list(time_range) if time_range else None},
            }]
            for key in selected:
                state = self.sessions[key]
                sid, role = key[0], key[1].value
                records.append({"type": "session", "session_id": sid, "role": role})
                for m in state.chain:
                    records.append({"type": "message", "session_id": sid, "role": role, "message": m.encoded})
                for op, r in sorted(state.evidence.items()):
                    records.append({"type": "receipt", "session_id": sid, "role": role, "receipt": r.to_dict()})
                for net in sorted(self.served):
                    for rec in self.ledgers[net].records:
                        if rec.session_id == sid:
                            records.append({"type": "ledger", "network": net, "record": rec.to_dict()})
                for e in entries:
                    if e.key == (sid, role):
                        kept = e if e.kind in _BUNDLE_KEEP else e.elided()
                        records.append({"type": "wal", "entry": kept.to_dict()})
            body = encoding.dump_lines(records)
            seal_digest = digest(body)
            seal = {"type": "seal", "signer": self.id, "digest": seal_digest,
                    "signature": self.key.sign(BUNDLE_SEAL_DOMAIN + seal_digest)}
            return body + encoding.dump_lines([seal])
