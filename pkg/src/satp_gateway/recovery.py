"""Write-ahead log, crash recovery and rollback.

Every session transition, sent or received message, pending ledger command
and ledger receipt is appended here before it has any externally visible
effect. ``recover`` rebuilds session states from the log alone.
"""

from __future__ import annotations

import enum
import os
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, NamedTuple

from . import encoding
from .crypto import ZERO_HASH, KeyPair, digest
from .evidence import EvidenceReceipt
from .ledger import LedgerOp
from .protocol import (
    LedgerCommand,
    MsgType,
    Phase,
    Role,
    SatpMessage,
    SessionState,
    StepContext,
    _emit,
    make_control,
)

WAL_DOMAIN = b"satp.wal.v1"


class WalKind(str, enum.Enum):
    STATE_TRANSITION = "STATE_TRANSITION"
    INTENT = "INTENT"
    EVIDENCE = "EVIDENCE"
    MESSAGE_SENT = "MESSAGE_SENT"
    MESSAGE_RECEIVED = "MESSAGE_RECEIVED"
    COMMIT_POINT = "COMMIT_POINT"
    TERMINAL = "TERMINAL"


STATE_KINDS = frozenset({WalKind.STATE_TRANSITION, WalKind.COMMIT_POINT, WalKind.TERMINAL})
_STATE_KIND_VALUES = frozenset(k.value for k in STATE_KINDS)


class OutOfOrderSeq(Exception):
    pass


class CorruptLog(Exception):
    pass


class CommitPointPassed(Exception):
    pass


@dataclass(frozen=True)
class WalEntry:
    wal_seq: int
    session_id: str
    role: str
    kind: str
    snapshot: bytes | None
    snapshot_digest: bytes
    prev_hash: bytes
    entry_hash: bytes
    timestamp: int
    order: int

    def header(self) -> dict[str, Any]:
        return {
            "wal_seq": self.wal_seq,
            "session_id": self.session_id,
            "role": self.role,
            "kind": self.kind,
            "snapshot_digest": self.snapshot_digest,
            "prev_hash": self.prev_hash,
            "timestamp": self.timestamp,
            "order": self.order,
        }

    def computed_hash(self) -> bytes:
        return digest(WAL_DOMAIN + encoding.encode(self.header()))

    def self_consistent(self) -> bool:
        if self.snapshot is not None and digest(self.snapshot) != self.snapshot_digest:
            return False
        return self.computed_hash() == self.entry_hash

    def elided(self) -> "WalEntry":
        """Same entry without the snapshot body; still hash-verifiable."""
        return replace(self, snapshot=None)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "WalEntry":
        if not isinstance(data, dict) or set(data) != set(cls.__dataclass_fields__):
            raise encoding.DecodeError("malformed WAL entry")
        return cls(**data)

    @property
    def key(self) -> tuple[str, str]:
        return (self.session_id, self.role)

    def decoded(self) -> Any:
        return encoding.decode(self.snapshot)


class MemoryWalStore:
    """Durable-by-fiat storage: survives a simulated crash because the
    harness keeps the store object while discarding the gateway."""

    def __init__(self):
        self.entries: list[WalEntry] = []

    def load(self) -> list[WalEntry]:
        return list(self.entries)

    def append(self, entry: WalEntry) -> None:
        self.entries.append(entry)


class FileWalStore:
    """Append-only file of canonical records, fsynced per append."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)

    def load(self) -> list[WalEntry]:
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            # torn final write: the entry was never acknowledged
            data = data[: data.rfind(b"\n") + 1]
        return [WalEntry.from_dict(r) for r in encoding.load_lines(data)]

    def append(self, entry: WalEntry) -> None:
        with open(self.path, "ab") as fh:
            fh.write(encoding.dump_lines([entry.to_dict()]))
            fh.flush()
            os.fsync(fh.fileno())


class WriteAheadLog:
    def __init__(self, store=None, clock=None):
        self.store = store if store is not None else MemoryWalStore()
        self.clock = clock
        self._entries: list[WalEntry] = self.store.load()
        self._lock = threading.Lock()

    @property
    def entries(self) -> tuple[WalEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def build(self, session_id: str, role: Role | str, kind: WalKind | str,
              snapshot: bytes) -> WalEntry:
        prev = self._entries[-1].entry_hash if self._entries else ZERO_HASH
        unsigned = WalEntry(
            wal_seq=len(self._entries) + 1,
            session_id=session_id,
            role=Role(role).value if role else "",
            kind=WalKind(kind).value,
            snapshot=snapshot,
            snapshot_digest=digest(snapshot),
            prev_hash=prev,
            entry_hash=b"",
            timestamp=self.clock.now if self.clock else 0,
            order=self.clock.next_order() if self.clock else 0,
        )
        return replace(unsigned, entry_hash=unsigned.computed_hash())

    def append_wal(self, entry: WalEntry) -> WalEntry:
        """Make ``entry`` durable; the returned entry is the acknowledgment."""
        with self._lock:
            expected = len(self._entries) + 1
            if entry.wal_seq != expected:
                raise OutOfOrderSeq(f"wal_seq {entry.wal_seq}, expected {expected}")
            self.store.append(entry)
            self._entries.append(entry)
        return entry

    def append(self, session_id: str, role: Role | str, kind: WalKind | str, snapshot: bytes) -> WalEntry:
        with self._lock:
            entry = self.build(session_id, role, kind, snapshot)
            self.store.append(entry)
            self._entries.append(entry)
        return entry

    def export(self) -> bytes:
        return encoding.dump_lines(e.to_dict() for e in self._entries)


def first_break(entries: Iterable[WalEntry]) -> int | None:
    """Index of the first entry whose hash chain does not verify, or None."""
    prev = ZERO_HASH
    for i, e in enumerate(entries):
        if e.wal_seq != i + 1 or e.prev_hash != prev or not e.self_consistent():
            return i
        prev = e.entry_hash
    return None


def verify_wal(entries) -> bool:
    return first_break(entries) is None


# -- recovery -----------------------------------------------------------------

@dataclass
class RecoveredState:
    sessions: dict[tuple[str, Role], SessionState] = field(default_factory=dict)
    pending_intents: list[tuple[tuple[str, Role], LedgerCommand]] = field(default_factory=list)
    unapplied_evidence: list[tuple[tuple[str, Role], EvidenceReceipt]] = field(default_factory=list)
    last_seq: dict[tuple[str, Role], int] = field(default_factory=dict)
    preflight: dict[str, dict] = field(default_factory=dict)
    failed: set[tuple[str, Role]] = field(default_factory=set)

    def summary(self) -> dict[str, Any]:
        """Canonical-friendly view, for comparing two recoveries."""
        return {
            "sessions": {f"{k[0]}|{k[1].value}": s.to_dict() for k, s in sorted(self.sessions.items())},
            "pending": [[f"{k[0]}|{k[1].value}", c.to_dict()] for k, c in self.pending_intents],
            "evidence": [[f"{k[0]}|{k[1].value}", r.to_dict()] for k, r in self.unapplied_evidence],
            "last_seq": {f"{k[0]}|{k[1].value}": v for k, v in sorted(self.last_seq.items())},
            "failed": sorted(f"{k[0]}|{k[1].value}" for k in self.failed),
        }


def recover(entries: Iterable[WalEntry], key: KeyPair | None = None) -> tuple[RecoveredState, list[SatpMessage]]:
    """Rebuild session state from a WAL.

    Returns the recovered state and, when ``key`` is given, one signed
    RECOVERY_REQUEST per non-terminal session addressed to its peer.
    """
    entries = list(entries)
    brk = first_break(entries)
    trusted = entries if brk is None else entries[:brk]
    out = RecoveredState()
    states: dict[tuple[str, Role], SessionState] = {}
    # evidence logged after the latest state snapshot, per session and op
    late_evidence: dict[tuple[str, Role], dict[str, EvidenceReceipt]] = {}

    # only the latest snapshot per session needs decoding
    latest: dict[tuple[str, str], int] = {}
    for i, e in enumerate(trusted):
        if e.kind in _STATE_KIND_VALUES:
            latest[e.key] = i
    for i, e in enumerate(trusted):
        if not e.role:
            continue
        k = (e.session_id, Role(e.role))
        kind = WalKind(e.kind)
        if kind in STATE_KINDS:
            if latest[e.key] == i:
                states[k] = SessionState.decode(e.snapshot)
            late_evidence[k] = {}
        elif kind is WalKind.EVIDENCE:
            data = e.decoded()
            if "preflight" in data:
                out.preflight[e.session_id] = data["preflight"]
            else:
                late_evidence.setdefault(k, {})[data["op"]] = EvidenceReceipt.from_dict(data["receipt"])

    if brk is not None:
        for e in entries[brk:]:
            if e.role:
                k = (e.session_id, Role(e.role))
                out.failed.add(k)
                if k in states:
                    states[k] = replace(states[k], phase=Phase.FAILED, pending=())

    for k, state in sorted(states.items()):
        out.sessions[k] = state
        out.last_seq[k] = state.last_seq
        if k in out.failed:
            continue
        logged = late_evidence.get(k, {})
        for cmd in state.pending:
            if cmd.op in logged:
                out.unapplied_evidence.append((k, logged[cmd.op]))
            else:
                out.pending_intents.append((k, cmd))

    requests = []
    if key is not None:
        for (sid, role), state in sorted(out.sessions.items()):
            if not state.terminal and state.proposal is not None:
                requests.append(recovery_request(state, key))
    return out, requests


def recovery_request(state: SessionState, key: KeyPair) -> SatpMessage:
    head = state.chain[-1].hash if state.chain else ZERO_HASH
    return make_control(MsgType.RECOVERY_REQUEST, state.session_id,
                        {"role": state.role.peer.value, "last_seq": state.last_seq, "last_hash": head}, key)


def handle_recovery_request(state: SessionState | None, request: SatpMessage, key: KeyPair) -> SatpMessage:
    """Answer a peer's RECOVERY_REQUEST with every chained message it lacks.

    If the peer's head is not in our chain the two have forked (a rollback
    notice raced the peer's reply); the whole chain is sent and the peer's
    fork rule decides what to keep.
    """
    peer_last = request.payload.get("last_seq", 0)
    peer_head = request.payload.get("last_hash")
    requester_role = Role(request.payload["role"]).peer.value
    if state is None:
        payload = {"role": requester_role, "unknown": True, "messages": []}
    else:
        forked = (peer_head is not None and peer_last > 0
                  and (peer_last > len(state.chain) or state.chain[peer_last - 1].hash != bytes(peer_head)))
        payload = {"role": requester_role, "unknown": False,
                   "messages": [m.encoded for m in state.chain if forked or m.seq > peer_last]}
    return make_control(MsgType.RECOVERY_UPDATE, request.session_id, payload, key)


class RollbackResult(NamedTuple):
    state: SessionState
    messages: tuple[SatpMessage, ...]
    commands: tuple[LedgerCommand, ...]


def rollback(session: SessionState, ctx: StepContext) -> RollbackResult:
    """Unilateral compensation; only legal before the commit point."""
    if session.commit_point_passed:
        raise CommitPointPassed(session.session_id)
    if session.terminal:
        raise ValueError(f"{session.session_id} is already {session.phase.value}")
    p = session.proposal
    messages: tuple = ()
    commands: tuple = ()
    if session.role is Role.ORIGIN:
        # a pending lock may or may not have reached the ledger; unlocking is
        # harmless either way (the runtime tolerates NotLockedBySession)
        maybe_locked = (LedgerOp.LOCK.value in session.evidence
                        or any(c.op in (LedgerOp.LOCK.value, LedgerOp.UNLOCK.value) for c in session.pending))
        if maybe_locked and LedgerOp.UNLOCK.value not in session.evidence:
            commands = (LedgerCommand(LedgerOp.UNLOCK.value, p.origin_network, session.session_id,
                                      p.asset_id, p.amount),)
        if session.chain and session.phase is not Phase.ROLLBACK_PENDING:
            notice = _emit(session.chain, MsgType.ROLLBACK_NOTICE, {"reason": "OPERATOR_ROLLBACK"}, session, ctx)
            messages = (notice,)
    new = replace(session, phase=Phase.ROLLED_BACK, chain=session.chain + messages,
                  pending=commands, reasons=session.reasons + ("ROLLBACK",))
    return RollbackResult(new, messages, commands)
