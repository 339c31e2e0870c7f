"""Gateway-to-gateway transfer protocol: messages, session state and ``step``.

``step`` is a pure function. It never touches a ledger or the network; it
returns the new session state, the signed messages to send, and the ledger
commands the runtime must execute. Ledger results come back in as local
triggers carrying the evidence receipt.

Origin is the commitment coordinator. Its commit point is COMMIT_READY:
from there on it only rolls forward. The destination's commit point is an
accepted COMMIT_FINAL carrying valid burn evidence.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Mapping, NamedTuple

from . import encoding
from .assets import TravelRulePayload, validate_travel_rule
from .crypto import ZERO_HASH, KeyPair, KeyRing, digest, verify
from .evidence import EvidenceReceipt, Verdict, verify_evidence
from .ledger import LedgerOp

MESSAGE_DOMAIN = b"satp.message.v1"


class Role(str, enum.Enum):
    ORIGIN = "ORIGIN"
    DESTINATION = "DESTINATION"

    @property
    def peer(self) -> "Role":
        return Role.DESTINATION if self is Role.ORIGIN else Role.ORIGIN


class Phase(str, enum.Enum):
    PROPOSED = "PROPOSED"
    ACCEPTED = "ACCEPTED"
    REJECTED = "REJECTED"
    LOCKED = "LOCKED"
    LOCK_VERIFIED = "LOCK_VERIFIED"
    PREPARED = "PREPARED"
    COMMITTED_ORIGIN = "COMMITTED_ORIGIN"
    COMMITTED_DESTINATION = "COMMITTED_DESTINATION"
    COMPLETED = "COMPLETED"
    ROLLBACK_PENDING = "ROLLBACK_PENDING"
    ROLLED_BACK = "ROLLED_BACK"
    FAILED = "FAILED"


TERMINAL = frozenset({Phase.COMPLETED, Phase.ROLLED_BACK, Phase.FAILED, Phase.REJECTED})


class MsgType(str, enum.Enum):
    PROPOSAL = "PROPOSAL"
    PROPOSAL_RECEIPT = "PROPOSAL_RECEIPT"
    LOCK_ASSERTION = "LOCK_ASSERTION"
    LOCK_RECEIPT = "LOCK_RECEIPT"
    COMMIT_PREPARE = "COMMIT_PREPARE"
    COMMIT_READY = "COMMIT_READY"
    COMMIT_FINAL = "COMMIT_FINAL"
    ACK_COMMIT_FINAL = "ACK_COMMIT_FINAL"
    TRANSFER_COMPLETE = "TRANSFER_COMPLETE"
    ROLLBACK_NOTICE = "ROLLBACK_NOTICE"
    ROLLBACK_ACK = "ROLLBACK_ACK"
    RECOVERY_REQUEST = "RECOVERY_REQUEST"
    RECOVERY_UPDATE = "RECOVERY_UPDATE"


SENT_BY = {
    Role.ORIGIN: frozenset({
        MsgType.PROPOSAL, MsgType.LOCK_ASSERTION, MsgType.COMMIT_PREPARE,
        MsgType.COMMIT_FINAL, MsgType.TRANSFER_COMPLETE, MsgType.ROLLBACK_NOTICE,
    }),
    Role.DESTINATION: frozenset({
        MsgType.PROPOSAL_RECEIPT, MsgType.LOCK_RECEIPT, MsgType.COMMIT_READY,
        MsgType.ACK_COMMIT_FINAL, MsgType.ROLLBACK_ACK,
    }),
}
CONTROL_TYPES = frozenset({MsgType.RECOVERY_REQUEST, MsgType.RECOVERY_UPDATE})


def recipient_role(msg_type: MsgType) -> Role | None:
    """Role that consumes a chained message type; None for control messages."""
    if msg_type in SENT_BY[Role.ORIGIN]:
        return Role.DESTINATION
    if msg_type in SENT_BY[Role.DESTINATION]:
        return Role.ORIGIN
    return None


class TriggerKind(str, enum.Enum):
    START = "START"
    LOCK_DONE = "LOCK_DONE"
    BURN_DONE = "BURN_DONE"
    MINT_DONE = "MINT_DONE"
    UNLOCK_DONE = "UNLOCK_DONE"
    LEDGER_FAILED = "LEDGER_FAILED"
    TIMEOUT = "TIMEOUT"


DONE_FOR = {
    TriggerKind.LOCK_DONE: LedgerOp.LOCK.value,
    TriggerKind.BURN_DONE: LedgerOp.BURN.value,
    TriggerKind.MINT_DONE: LedgerOp.MINT.value,
    TriggerKind.UNLOCK_DONE: LedgerOp.UNLOCK.value,
}
TRIGGER_FOR_OP = {op: kind for kind, op in DONE_FOR.items()}


class ProtocolError(Exception):
    reason = "ProtocolError"


class InvalidSignature(ProtocolError):
    reason = "InvalidSignature"


class ChainBreak(ProtocolError):
    reason = "ChainBreak"


class BadSequence(ChainBreak):
    reason = "BadSequence"


class UnexpectedMessage(ProtocolError):
    reason = "UnexpectedMessage"


class EvidenceInvalid(ProtocolError):
    reason = "EvidenceInvalid"


_REJECT_ERRORS = {"InvalidSignature": InvalidSignature, "ChainBreak": ChainBreak, "BadSequence": BadSequence}


# -- domain types -------------------------------------------------------------

@dataclass(frozen=True)
class GatewayIdentity:
    gateway_id: str
    public_key: bytes
    served_networks: frozenset[str]

    def __post_init__(self):
        if not self.gateway_id:
            raise ValueError("gateway_id must be non-empty")
        if not self.served_networks:
            raise ValueError(f"{self.gateway_id} serves no networks")
        object.__setattr__(self, "served_networks", frozenset(self.served_networks))


@dataclass(frozen=True)
class TransferProposal:
    session_id: str
    origin_gateway: str
    destination_gateway: str
    origin_network: str
    destination_network: str
    asset_id: str
    profile_hash: bytes
    amount: int
    beneficiary: str
    travel_rule: TravelRulePayload
    lock_expiry: int
    proposal_nonce: bytes

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["travel_rule"] = self.travel_rule.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TransferProposal":
        if not isinstance(data, dict) or set(data) != set(cls.__dataclass_fields__):
            raise encoding.DecodeError("malformed proposal")
        return cls(**{**data, "travel_rule": TravelRulePayload.from_dict(data["travel_rule"])})

    def check_endpoints(self, origin: GatewayIdentity, destination: GatewayIdentity) -> list[str]:
        problems = []
        if self.origin_network not in origin.served_networks:
            problems.append(f"{origin.gateway_id} does not serve {self.origin_network}")
        if self.destination_network not in destination.served_networks:
            problems.append(f"{destination.gateway_id} does not serve {self.destination_network}")
        if self.origin_network == self.destination_network:
            problems.append("origin and destination networks are the same")
        return problems


@dataclass(frozen=True)
class SatpMessage:
    msg_type: MsgType
    session_id: str
    seq: int
    prev_hash: bytes
    payload: dict
    sender: str
    signature: bytes = b""

    def body(self) -> dict[str, Any]:
        return {
            "msg_type": self.msg_type.value,
            "session_id": self.session_id,
            "seq": self.seq,
            "prev_hash": self.prev_hash,
            "payload": self.payload,
            "sender": self.sender,
        }

    def signing_bytes(self) -> bytes:
        return MESSAGE_DOMAIN + encoding.encode(self.body())

    def to_dict(self) -> dict[str, Any]:
        return {**self.body(), "signature": self.signature}

    @cached_property
    def encoded(self) -> bytes:
        return encoding.encode(self.to_dict())

    @cached_property
    def hash(self) -> bytes:
        return digest(self.encoded)

    @classmethod
    def create(cls, msg_type: MsgType, session_id: str, seq: int, prev_hash: bytes,
               payload: dict, key: KeyPair) -> "SatpMessage":
        unsigned = cls(MsgType(msg_type), session_id, seq, prev_hash, payload, key.owner)
        return replace(unsigned, signature=key.sign(unsigned.signing_bytes()))

    @classmethod
    def from_dict(cls, data: Any) -> "SatpMessage":
        if not isinstance(data, dict) or set(data) != _MESSAGE_FIELDS:
            raise encoding.DecodeError("malformed message")
        try:
            msg_type = MsgType(data["msg_type"])
        except ValueError as exc:
            raise encoding.DecodeError(f"unknown msg_type {data['msg_type']!r}") from exc
        typed = (
            isinstance(data["session_id"], str) and isinstance(data["seq"], int)
            and not isinstance(data["seq"], bool) and isinstance(data["prev_hash"], bytes)
            and isinstance(data["payload"], dict) and isinstance(data["sender"], str)
            and isinstance(data["signature"], bytes)
        )
        if not typed:
            raise encoding.DecodeError("message field has wrong type")
        return cls(msg_type, data["session_id"], data["seq"], data["prev_hash"],
                   data["payload"], data["sender"], data["signature"])

    @classmethod
    def decode(cls, raw: bytes) -> "SatpMessage":
        msg = cls.from_dict(encoding.decode(raw))
        if msg.encoded != raw:
            raise encoding.DecodeError("non-canonical message encoding")
        return msg

    def __repr__(self) -> str:
        return f"SatpMessage({self.msg_type.value} {self.session_id}#{self.seq} from {self.sender})"


_MESSAGE_FIELDS = {"msg_type", "session_id", "seq", "prev_hash", "payload", "sender", "signature"}


@dataclass(frozen=True)
class LedgerCommand:
    op: str
    network: str
    session_id: str
    asset_id: str = ""
    amount: int = 0
    expiry: int = 0
    profile_id: str = ""
    beneficiary: str = ""
    origin_network: str = ""
    burn_evidence: EvidenceReceipt | None = None

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["burn_evidence"] = self.burn_evidence.to_dict() if self.burn_evidence else None
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LedgerCommand":
        ev = data.get("burn_evidence")
        return cls(**{**data, "burn_evidence": EvidenceReceipt.from_dict(ev) if ev else None})


@dataclass(frozen=True)
class Trigger:
    kind: TriggerKind
    receipt: EvidenceReceipt | None = None
    reason: str = ""


@dataclass(frozen=True)
class SessionState:
    session_id: str
    role: Role
    phase: Phase
    proposal: TransferProposal | None
    chain: tuple[SatpMessage, ...] = ()
    evidence: Mapping[str, EvidenceReceipt] = field(default_factory=dict)
    commit_point_passed: bool = False
    pending: tuple[LedgerCommand, ...] = ()
    rollback_acked: bool = False
    reasons: tuple[str, ...] = ()
    parked: bool = False

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL

    @property
    def last_seq(self) -> int:
        return len(self.chain)

    @property
    def peer_gateway(self) -> str:
        p = self.proposal
        return p.destination_gateway if self.role is Role.ORIGIN else p.origin_gateway

    @property
    def key(self) -> tuple[str, Role]:
        return (self.session_id, self.role)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "role": self.role.value,
            "phase": self.phase.value,
            "proposal": self.proposal.to_dict() if self.proposal else None,
            "chain": [m.encoded for m in self.chain],
            "evidence": {op: r.to_dict() for op, r in self.evidence.items()},
            "commit_point_passed": self.commit_point_passed,
            "pending": [c.to_dict() for c in self.pending],
            "rollback_acked": self.rollback_acked,
            "reasons": list(self.reasons),
            "parked": self.parked,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SessionState":
        return cls(
            session_id=data["session_id"],
            role=Role(data["role"]),
            phase=Phase(data["phase"]),
            proposal=TransferProposal.from_dict(data["proposal"]) if data["proposal"] else None,
            chain=tuple(SatpMessage.decode(raw) for raw in data["chain"]),
            evidence={op: EvidenceReceipt.from_dict(r) for op, r in data["evidence"].items()},
            commit_point_passed=data["commit_point_passed"],
            pending=tuple(LedgerCommand.from_dict(c) for c in data["pending"]),
            rollback_acked=data["rollback_acked"],
            reasons=tuple(data["reasons"]),
            parked=data["parked"],
        )

    def encode(self) -> bytes:
        return encoding.encode(self.to_dict())

    @classmethod
    def decode(cls, raw: bytes) -> "SessionState":
        return cls.from_dict(encoding.decode(raw))


def new_origin_session(proposal: TransferProposal) -> SessionState:
    return SessionState(proposal.session_id, Role.ORIGIN, Phase.PROPOSED, proposal)


def new_destination_session(msg: SatpMessage) -> SessionState:
    """Fresh destination state for an incoming PROPOSAL (not yet applied)."""
    if msg.msg_type is not MsgType.PROPOSAL:
        raise UnexpectedMessage(f"{msg.msg_type.value} for unknown session {msg.session_id}")
    try:
        proposal = TransferProposal.from_dict(msg.payload.get("proposal"))
    except (encoding.DecodeError, TypeError, KeyError) as exc:
        raise UnexpectedMessage(f"malformed proposal: {exc}") from exc
    if proposal.session_id != msg.session_id:
        raise UnexpectedMessage("proposal session_id does not match envelope")
    return SessionState(msg.session_id, Role.DESTINATION, Phase.PROPOSED, proposal)


@dataclass(frozen=True)
class StepContext:
    """Everything ``step`` may consult besides the state and the event."""

    key: KeyPair
    keys: KeyRing
    profiles: Mapping[bytes, str]
    served_networks: frozenset[str]
    attest: Callable[[str], str] = lambda party: "VERIFIED"

    @property
    def gateway_id(self) -> str:
        return self.key.owner


class StepResult(NamedTuple):
    state: SessionState
    messages: tuple[SatpMessage, ...]
    commands: tuple[LedgerCommand, ...]


# -- verification -------------------------------------------------------------

def verify_message(msg: SatpMessage, expected_prev: bytes, expected_seq: int,
                   sender_key: bytes | None) -> Verdict:
    if not verify(sender_key, msg.signing_bytes(), msg.signature):
        return Verdict(False, "InvalidSignature", msg.sender)
    if msg.seq != expected_seq:
        return Verdict(False, "BadSequence", f"seq {msg.seq}, expected {expected_seq}")
    if msg.prev_hash != expected_prev:
        return Verdict(False, "ChainBreak", f"prev_hash mismatch at seq {msg.seq}")
    return Verdict(True)


def verify_chain(chain, keys: Mapping[str, bytes]) -> Verdict:
    prev = ZERO_HASH
    for i, msg in enumerate(chain, start=1):
        verdict = verify_message(msg, prev, i, keys.get(msg.sender))
        if not verdict:
            return verdict
        prev = msg.hash
    return Verdict(True)


def make_control(msg_type: MsgType, session_id: str, payload: dict, key: KeyPair) -> SatpMessage:
    """Unchained, signed recovery message (seq 0)."""
    return SatpMessage.create(msg_type, session_id, 0, ZERO_HASH, payload, key)


# -- the transition function --------------------------------------------------

def _emit(chain: tuple, msg_type: MsgType, payload: dict, state: SessionState,
          ctx: StepContext) -> SatpMessage:
    prev = chain[-1].hash if chain else ZERO_HASH
    return SatpMessage.create(msg_type, state.session_id, len(chain) + 1, prev, payload, ctx.key)


def _evidence(payload_value: Any, expected: dict[str, Any], network: str,
              ctx: StepContext) -> EvidenceReceipt:
    try:
        receipt = EvidenceReceipt.from_dict(payload_value)
    except (encoding.DecodeError, TypeError) as exc:
        raise EvidenceInvalid(f"malformed receipt: {exc}") from exc
    if receipt.signer != network:
        raise EvidenceInvalid(f"receipt signed by {receipt.signer}, expected {network}")
    verdict = verify_evidence(receipt, {**expected, "network": network}, ctx.keys.get(receipt.signer))
    if not verdict:
        raise EvidenceInvalid(f"{verdict.reason}({verdict.detail})")
    return receipt


def _accept_chain(state: SessionState, msg: SatpMessage, ctx: StepContext) -> tuple:
    """Validate an incoming chained message; return the chain it extends."""
    if msg.session_id != state.session_id:
        raise UnexpectedMessage("session mismatch")
    if msg.msg_type in CONTROL_TYPES or msg.msg_type not in SENT_BY[state.role.peer]:
        raise UnexpectedMessage(f"{msg.msg_type.value} is not sent to {state.role.value}")
    if msg.sender != state.peer_gateway:
        raise UnexpectedMessage(f"sender {msg.sender} is not the session peer")
    chain = state.chain
    idx = msg.seq - 1
    if 0 <= idx < len(chain) and chain[idx].hash == msg.hash:
        raise UnexpectedMessage(f"duplicate of accepted message #{msg.seq}")
    base = chain
    # The coordinator may roll back while our own reply is still unacknowledged;
    # the notice then forks the chain just before that reply.
    if (msg.msg_type is MsgType.ROLLBACK_NOTICE and state.role is Role.DESTINATION
            and not state.commit_point_passed and 1 <= msg.seq <= len(chain)
            and all(m.msg_type in SENT_BY[Role.DESTINATION] for m in chain[idx:])):
        base = chain[:idx]
    prev = base[-1].hash if base else ZERO_HASH
    verdict = verify_message(msg, prev, len(base) + 1, ctx.keys.get(msg.sender))
    if not verdict:
        raise _REJECT_ERRORS[verdict.reason](verdict.detail)
    return base + (msg,)


def _proposal_problems(state: SessionState, ctx: StepContext) -> list[str]:
    p = state.proposal
    reasons = []
    if p.destination_gateway != ctx.gateway_id:
        reasons.append("WRONG_GATEWAY")
    if p.destination_network not in ctx.served_networks:
        reasons.append("NETWORK_NOT_SERVED")
    if p.origin_network == p.destination_network:
        reasons.append("SAME_NETWORK")
    if p.amount <= 0:
        reasons.append("AMOUNT_INVALID")
    if bytes(p.profile_hash) not in ctx.profiles:
        reasons.append("PROFILE_UNKNOWN")
    reasons.extend(validate_travel_rule(p.travel_rule).codes)
    for party in (p.travel_rule.originator_account, p.beneficiary):
        verdict = ctx.attest(party) if party else "UNKNOWN"
        if verdict != "VERIFIED":
            reasons.append("IDP_UNAVAILABLE" if verdict == "UNAVAILABLE" else f"IDENTITY_{verdict}")
    return list(dict.fromkeys(reasons))


def _start_rollback(state: SessionState, chain: tuple, reason: str, ctx: StepContext) -> StepResult:
    p = state.proposal
    notice = _emit(chain, MsgType.ROLLBACK_NOTICE, {"reason": reason}, state, ctx)
    commands: tuple = ()
    if LedgerOp.LOCK.value in state.evidence:
        commands = (LedgerCommand(LedgerOp.UNLOCK.value, p.origin_network, state.session_id, p.asset_id, p.amount),)
    new = replace(state, phase=Phase.ROLLBACK_PENDING, chain=chain + (notice,), pending=commands,
                  reasons=state.reasons + (reason,))
    return StepResult(new, (notice,), commands)


def _rollback_settled(state: SessionState) -> bool:
    return not any(c.op == LedgerOp.UNLOCK.value for c in state.pending)


def step(state: SessionState, event: SatpMessage | Trigger, ctx: StepContext) -> StepResult:
    """Apply one event to a session. Raises ``ProtocolError`` without side effects."""
    if isinstance(event, Trigger):
        return _on_trigger(state, event, ctx)
    if state.role is Role.ORIGIN:
        return _origin_message(state, event, ctx)
    return _destination_message(state, event, ctx)


def _on_trigger(state: SessionState, trig: Trigger, ctx: StepContext) -> StepResult:
    p = state.proposal
    kind = trig.kind
    phase = state.phase

    if kind in DONE_FOR:
        op = DONE_FOR[kind]
        waiting = [c for c in state.pending if c.op == op]
        if not waiting or trig.receipt is None:
            raise UnexpectedMessage(f"{kind.value} without a pending {op}")
        receipt = trig.receipt
        if receipt.op != op or receipt.session_id != state.session_id:
            raise EvidenceInvalid(f"receipt for {receipt.op}/{receipt.session_id}")
        rest = tuple(c for c in state.pending if c.op != op)
        evidence = {**state.evidence, op: receipt}
        base = replace(state, evidence=evidence, pending=rest)

        if state.role is Role.ORIGIN and kind is TriggerKind.LOCK_DONE and phase is Phase.ACCEPTED:
            msg = _emit(state.chain, MsgType.LOCK_ASSERTION, {"lock_evidence": receipt.to_dict()}, state, ctx)
            return StepResult(replace(base, phase=Phase.LOCKED, chain=state.chain + (msg,)), (msg,), ())
        if state.role is Role.ORIGIN and kind is TriggerKind.BURN_DONE and phase is Phase.PREPARED:
            msg = _emit(state.chain, MsgType.COMMIT_FINAL, {"burn_evidence": receipt.to_dict()}, state, ctx)
            return StepResult(replace(base, phase=Phase.COMMITTED_ORIGIN, chain=state.chain + (msg,)), (msg,), ())
        if state.role is Role.DESTINATION and kind is TriggerKind.MINT_DONE and phase is Phase.COMMITTED_DESTINATION:
            msg = _emit(state.chain, MsgType.ACK_COMMIT_FINAL, {"mint_evidence": receipt.to_dict()}, state, ctx)
            return StepResult(replace(base, chain=state.chain + (msg,)), (msg,), ())
        if kind is TriggerKind.UNLOCK_DONE and phase is Phase.ROLLBACK_PENDING:
            if state.rollback_acked:
                base = replace(base, phase=Phase.ROLLED_BACK)
            return StepResult(base, (), ())
        if kind is TriggerKind.UNLOCK_DONE and phase is Phase.ROLLED_BACK:
            return StepResult(base, (), ())
        raise UnexpectedMessage(f"{kind.value} in {phase.value}")

    if kind is TriggerKind.START:
        if state.role is not Role.ORIGIN or phase is not Phase.PROPOSED or state.chain:
            raise UnexpectedMessage("START is only legal for a fresh origin session")
        msg = _emit((), MsgType.PROPOSAL, {"proposal": p.to_dict()}, state, ctx)
        return StepResult(replace(state, chain=(msg,)), (msg,), ())

    if kind is TriggerKind.LEDGER_FAILED:
        if state.role is Role.ORIGIN and phase is Phase.ACCEPTED and not state.commit_point_passed:
            cleared = replace(state, pending=())
            return _start_rollback(cleared, state.chain, trig.reason or "LOCK_FAILED", ctx)
        unlocking = [c for c in state.pending if c.op == LedgerOp.UNLOCK.value]
        if (state.role is Role.ORIGIN and unlocking and trig.reason == "NotLockedBySession"
                and phase in (Phase.ROLLBACK_PENDING, Phase.ROLLED_BACK)):
            # the lock never reached the ledger, so there is nothing to compensate
            rest = tuple(c for c in state.pending if c.op != LedgerOp.UNLOCK.value)
            settled = phase is Phase.ROLLED_BACK or state.rollback_acked
            return StepResult(replace(state, pending=rest,
                                      phase=Phase.ROLLED_BACK if settled else phase), (), ())
        raise UnexpectedMessage(f"ledger failure in {phase.value} cannot be compensated")

    if kind is TriggerKind.TIMEOUT:
        if state.role is not Role.ORIGIN or state.commit_point_passed:
            raise UnexpectedMessage("only the origin times out, and only before the commit point")
        if phase in (Phase.PROPOSED, Phase.LOCKED, Phase.LOCK_VERIFIED) and state.chain:
            return _start_rollback(state, state.chain, trig.reason or "TIMEOUT", ctx)
        if phase is Phase.ROLLBACK_PENDING and _rollback_settled(state):
            # peer unreachable: finish unilaterally
            return StepResult(replace(state, phase=Phase.ROLLED_BACK), (), ())
        raise UnexpectedMessage(f"TIMEOUT in {phase.value}")

    raise UnexpectedMessage(f"unhandled trigger {kind}")


def _origin_message(state: SessionState, msg: SatpMessage, ctx: StepContext) -> StepResult:
    chain = _accept_chain(state, msg, ctx)
    p = state.proposal
    phase, t = state.phase, msg.msg_type

    if phase is Phase.PROPOSED and t is MsgType.PROPOSAL_RECEIPT:
        if msg.payload.get("accept") is True:
            cmd = LedgerCommand(LedgerOp.LOCK.value, p.origin_network, p.session_id, p.asset_id,
                                p.amount, expiry=p.lock_expiry)
            return StepResult(replace(state, phase=Phase.ACCEPTED, chain=chain, pending=(cmd,)), (), (cmd,))
        reasons = tuple(str(r) for r in msg.payload.get("reasons", ()))
        return _start_rollback(replace(state, reasons=reasons), chain, "REJECTED_BY_PEER", ctx)

    if phase is Phase.LOCKED and t is MsgType.LOCK_RECEIPT:
        out = _emit(chain, MsgType.COMMIT_PREPARE, {}, state, ctx)
        return StepResult(replace(state, phase=Phase.LOCK_VERIFIED, chain=chain + (out,)), (out,), ())

    if phase is Phase.LOCK_VERIFIED and t is MsgType.COMMIT_READY:
        cmd = LedgerCommand(LedgerOp.BURN.value, p.origin_network, p.session_id, p.asset_id, p.amount)
        new = replace(state, phase=Phase.PREPARED, chain=chain, commit_point_passed=True, pending=(cmd,))
        return StepResult(new, (), (cmd,))

    if phase is Phase.COMMITTED_ORIGIN and t is MsgType.ACK_COMMIT_FINAL:
        expected = {"op": LedgerOp.MINT.value, "session_id": p.session_id, "amount": p.amount}
        receipt = _evidence(msg.payload.get("mint_evidence"), expected, p.destination_network, ctx)
        out = _emit(chain, MsgType.TRANSFER_COMPLETE, {}, state, ctx)
        new = replace(state, phase=Phase.COMPLETED, chain=chain + (out,),
                      evidence={**state.evidence, LedgerOp.MINT.value: receipt})
        return StepResult(new, (out,), ())

    if phase is Phase.ROLLBACK_PENDING and t is MsgType.ROLLBACK_ACK:
        settled = _rollback_settled(state)
        new = replace(state, chain=chain, rollback_acked=True,
                      phase=Phase.ROLLED_BACK if settled else Phase.ROLLBACK_PENDING)
        return StepResult(new, (), ())

    if phase is Phase.ROLLED_BACK and t is MsgType.ROLLBACK_ACK:
        # late acknowledgment after a unilateral rollback; recorded, phase unchanged
        return StepResult(replace(state, chain=chain, rollback_acked=True), (), ())

    raise UnexpectedMessage(f"{t.value} in ORIGIN/{phase.value}")


def _destination_message(state: SessionState, msg: SatpMessage, ctx: StepContext) -> StepResult:
    chain = _accept_chain(state, msg, ctx)
    p = state.proposal
    phase, t = state.phase, msg.msg_type

    if phase is Phase.PROPOSED and t is MsgType.PROPOSAL and len(chain) == 1:
        reasons = _proposal_problems(state, ctx)
        out = _emit(chain, MsgType.PROPOSAL_RECEIPT, {"accept": not reasons, "reasons": reasons}, state, ctx)
        new = replace(state, chain=chain + (out,), reasons=tuple(reasons),
                      phase=Phase.REJECTED if reasons else Phase.ACCEPTED)
        return StepResult(new, (out,), ())

    if phase is Phase.ACCEPTED and t is MsgType.LOCK_ASSERTION:
        expected = {"op": LedgerOp.LOCK.value, "session_id": p.session_id,
                    "asset_id": p.asset_id, "amount": p.amount}
        receipt = _evidence(msg.payload.get("lock_evidence"), expected, p.origin_network, ctx)
        out = _emit(chain, MsgType.LOCK_RECEIPT, {"verified": True}, state, ctx)
        new = replace(state, phase=Phase.LOCK_VERIFIED, chain=chain + (out,),
                      evidence={**state.evidence, LedgerOp.LOCK.value: receipt})
        return StepResult(new, (out,), ())

    if phase is Phase.LOCK_VERIFIED and t is MsgType.COMMIT_PREPARE:
        out = _emit(chain, MsgType.COMMIT_READY, {}, state, ctx)
        return StepResult(replace(state, phase=Phase.PREPARED, chain=chain + (out,)), (out,), ())

    if phase is Phase.PREPARED and t is MsgType.COMMIT_FINAL:
        profile_id = ctx.profiles.get(bytes(p.profile_hash))
        if profile_id is None:
            raise EvidenceInvalid("profile no longer known")
        expected = {"op": LedgerOp.BURN.value, "session_id": p.session_id, "asset_id": p.asset_id,
                    "amount": p.amount, "profile_id": profile_id}
        receipt = _evidence(msg.payload.get("burn_evidence"), expected, p.origin_network, ctx)
        cmd = LedgerCommand(LedgerOp.MINT.value, p.destination_network, p.session_id, "", p.amount,
                            profile_id=profile_id, beneficiary=p.beneficiary,
                            origin_network=p.origin_network, burn_evidence=receipt)
        new = replace(state, phase=Phase.COMMITTED_DESTINATION, chain=chain, commit_point_passed=True,
                      pending=(cmd,), evidence={**state.evidence, LedgerOp.BURN.value: receipt})
        return StepResult(new, (), (cmd,))

    if (phase is Phase.COMMITTED_DESTINATION and t is MsgType.TRANSFER_COMPLETE
            and LedgerOp.MINT.value in state.evidence):
        return StepResult(replace(state, phase=Phase.COMPLETED, chain=chain), (), ())

    if t is MsgType.ROLLBACK_NOTICE and not state.commit_point_passed:
        if phase in (Phase.ACCEPTED, Phase.LOCK_VERIFIED, Phase.PREPARED):
            out = _emit(chain, MsgType.ROLLBACK_ACK, {}, state, ctx)
            new = replace(state, phase=Phase.ROLLED_BACK, chain=chain + (out,),
                          reasons=state.reasons + (str(msg.payload.get("reason", "")),))
            return StepResult(new, (out,), ())
        if phase in (Phase.REJECTED, Phase.ROLLED_BACK):
            # already settled locally; acknowledge without a phase change
            out = _emit(chain, MsgType.ROLLBACK_ACK, {}, state, ctx)
            return StepResult(replace(state, chain=chain + (out,)), (out,), ())

    raise UnexpectedMessage(f"{t.value} in DESTINATION/{phase.value}")


# -- message grammar (used by the offline audit) ------------------------------

def legal_successors(msg: SatpMessage | None) -> frozenset[MsgType]:
    """Message types that may follow ``msg`` in a session chain."""
    if msg is None:
        return frozenset({MsgType.PROPOSAL})
    t = msg.msg_type
    if t is MsgType.PROPOSAL_RECEIPT and msg.payload.get("accept") is not True:
        return frozenset({MsgType.ROLLBACK_NOTICE})
    return _GRAMMAR[t]


_GRAMMAR = {
    MsgType.PROPOSAL: frozenset({MsgType.PROPOSAL_RECEIPT, MsgType.ROLLBACK_NOTICE}),
    MsgType.PROPOSAL_RECEIPT: frozenset({MsgType.LOCK_ASSERTION, MsgType.ROLLBACK_NOTICE}),
    MsgType.LOCK_ASSERTION: frozenset({MsgType.LOCK_RECEIPT, MsgType.ROLLBACK_NOTICE}),
    MsgType.LOCK_RECEIPT: frozenset({MsgType.COMMIT_PREPARE, MsgType.ROLLBACK_NOTICE}),
    MsgType.COMMIT_PREPARE: frozenset({MsgType.COMMIT_READY, MsgType.ROLLBACK_NOTICE}),
    MsgType.COMMIT_READY: frozenset({MsgType.COMMIT_FINAL}),
    MsgType.COMMIT_FINAL: frozenset({MsgType.ACK_COMMIT_FINAL}),
    MsgType.ACK_COMMIT_FINAL: frozenset({MsgType.TRANSFER_COMPLETE}),
    MsgType.TRANSFER_COMPLETE: frozenset(),
    MsgType.ROLLBACK_NOTICE: frozenset({MsgType.ROLLBACK_ACK}),
    MsgType.ROLLBACK_ACK: frozenset(),
    MsgType.RECOVERY_REQUEST: frozenset(),
    MsgType.RECOVERY_UPDATE: frozenset(),
}
