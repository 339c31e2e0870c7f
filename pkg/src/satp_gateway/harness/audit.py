"""Offline third-party verification of exported evidence bundles.

``audit_verify`` needs only the bundle bytes and the public keys of the
gateways and networks involved. Checks run in a fixed order and the first
failure is reported:

- Malformed          header and seal lines are strict base64 canonical records
- SignatureInvalid   the seal: a digest of every preceding byte, signed by
                     the exporter (checked before the interior is decoded)
- Malformed          every interior line decodes to a known record type
- SignatureInvalid   every message signature and every ledger receipt
- ChainBreak         per-session message chains and WAL entry hashes
- LedgerMismatch     receipts, proposals and ledger records agree
- IllegalTransition  the message sequence is a path of the protocol grammar
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from .. import encoding
from ..crypto import ZERO_HASH, digest, verify
from ..evidence import EvidenceReceipt
from ..gateway import BUNDLE_SCHEMA, BUNDLE_SEAL_DOMAIN
from ..ledger import LedgerOp, LedgerRecord, record_params_hash
from ..protocol import CONTROL_TYPES, SENT_BY, MsgType, Role, SatpMessage, TransferProposal, legal_successors
from ..recovery import WalEntry, WalKind

MALFORMED = "Malformed"
SIGNATURE_INVALID = "SignatureInvalid"
CHAIN_BREAK = "ChainBreak"
LEDGER_MISMATCH = "LedgerMismatch"
ILLEGAL_TRANSITION = "IllegalTransition"

_EVIDENCE_FIELDS = {
    MsgType.LOCK_ASSERTION: "lock_evidence",
    MsgType.COMMIT_FINAL: "burn_evidence",
    MsgType.ACK_COMMIT_FINAL: "mint_evidence",
}


@dataclass(frozen=True)
class AuditResult:
    ok: bool
    reason: str | None = None
    detail: str = ""
    sessions: int = 0

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return f"ACCEPT ({self.sessions} session logs verified)"
        return f"REJECT {self.reason}: {self.detail}"


class _Reject(Exception):
    def __init__(self, reason: str, detail: str):
        super().__init__(detail)
        self.reason = reason
        self.detail = detail


@dataclass
class _SessionLog:
    session_id: str
    role: str
    messages: list[SatpMessage]
    receipts: list[EvidenceReceipt]
    wal: list[WalEntry]


def _record(line: bytes) -> dict:
    rec, _ = encoding.load_line(line)
    if not isinstance(rec, dict) or not isinstance(rec.get("type"), str):
        raise encoding.DecodeError("record without a type")
    return rec


def _frame(bundle: bytes) -> tuple[dict, dict, list[bytes], bytes]:
    """Header, seal, interior lines and sealed body; only two lines decoded."""
    try:
        if not bundle.endswith(b"\n"):
            raise encoding.DecodeError("bundle must end with a newline")
        lines = bundle.split(b"\n")[:-1]
        if len(lines) < 2:
            raise encoding.DecodeError("bundle must hold a header and a seal")
        header, seal = _record(lines[0]), _record(lines[-1])
        if header["type"] != "header" or header.get("schema") != BUNDLE_SCHEMA:
            raise encoding.DecodeError("missing or unknown bundle header")
        if seal["type"] != "seal" or set(seal) != {"type", "signer", "digest", "signature"}:
            raise encoding.DecodeError("missing or malformed seal")
        body = b"".join(line + b"\n" for line in lines[:-1])
        return header, seal, lines[1:-1], body
    except (encoding.DecodeError, KeyError, TypeError, ValueError) as exc:
        raise _Reject(MALFORMED, str(exc) or type(exc).__name__) from exc


def _check_seal(header: dict, seal: dict, body: bytes, keys) -> None:
    signer = seal["signer"]
    if signer != header.get("exporter"):
        raise _Reject(SIGNATURE_INVALID, "seal signer is not the exporter")
    if seal["digest"] != digest(body):
        raise _Reject(SIGNATURE_INVALID, "bundle digest does not match the seal")
    if not verify(keys.get(signer), BUNDLE_SEAL_DOMAIN + seal["digest"], seal["signature"]):
        raise _Reject(SIGNATURE_INVALID, f"seal signature by {signer}")


def _parse(lines: list[bytes]) -> tuple[list[_SessionLog], list[tuple[str, LedgerRecord]]]:
    try:
        logs: list[_SessionLog] = []
        index: dict[tuple[str, str], _SessionLog] = {}
        ledger: list[tuple[str, LedgerRecord]] = []
        for line in lines:
            rec = _record(line)
            kind = rec["type"]
            if kind == "session":
                key = (rec["session_id"], rec["role"])
                if key in index or set(rec) != {"type", "session_id", "role"}:
                    raise encoding.DecodeError(f"bad session record {key}")
                Role(rec["role"])
                index[key] = _SessionLog(rec["session_id"], rec["role"], [], [], [])
                logs.append(index[key])
            elif kind in ("message", "receipt"):
                log = index.get((rec.get("session_id"), rec.get("role")))
                if log is None:
                    raise encoding.DecodeError(f"{kind} before its session record")
                if kind == "message":
                    log.messages.append(SatpMessage.decode(rec["message"]))
                else:
                    log.receipts.append(EvidenceReceipt.from_dict(rec["receipt"]))
            elif kind == "ledger":
                ledger.append((rec["network"], LedgerRecord.from_dict(rec["record"])))
            elif kind == "wal":
                entry = WalEntry.from_dict(rec["entry"])
                log = index.get((entry.session_id, entry.role))
                if log is None:
                    raise encoding.DecodeError("WAL entry for a session not in the bundle")
                log.wal.append(entry)
            else:
                raise encoding.DecodeError(f"unknown record type {kind!r}")
        return logs, ledger
    except (encoding.DecodeError, KeyError, TypeError, ValueError) as exc:
        raise _Reject(MALFORMED, str(exc) or type(exc).__name__) from exc


def _receipts_in(log: _SessionLog) -> list[EvidenceReceipt]:
    found = list(log.receipts)
    for m in log.messages:
        name = _EVIDENCE_FIELDS.get(m.msg_type)
        if name is not None and name in m.payload:
            try:
                found.append(EvidenceReceipt.from_dict(m.payload[name]))
            except (encoding.DecodeError, TypeError) as exc:
                raise _Reject(LEDGER_MISMATCH, f"{m!r} carries a malformed receipt") from exc
    return found


def _check_signatures(logs, keys) -> None:
    for log in logs:
        for m in log.messages:
            if not verify(keys.get(m.sender), m.signing_bytes(), m.signature):
                raise _Reject(SIGNATURE_INVALID, f"{m!r}")
        for r in _receipts_in(log):
            if r.signer != r.network or not verify(keys.get(r.signer), r.signing_bytes(), r.signature):
                raise _Reject(SIGNATURE_INVALID, f"receipt {r.op} #{r.ledger_seq} on {r.network}")


def _check_chains(logs) -> None:
    for log in logs:
        prev = ZERO_HASH
        for i, m in enumerate(log.messages, start=1):
            if m.session_id != log.session_id or m.seq != i or m.prev_hash != prev:
                raise _Reject(CHAIN_BREAK, f"{log.session_id}/{log.role} at message {i}")
            prev = m.hash
        last_seq = 0
        for e in log.wal:
            if e.wal_seq <= last_seq or not e.self_consistent():
                raise _Reject(CHAIN_BREAK, f"{log.session_id}/{log.role} WAL entry {e.wal_seq}")
            last_seq = e.wal_seq
        # messages the gateway logged as exchanged must be the chain it presents,
        # apart from replies discarded when a rollback notice forked the chain
        chain = {m.encoded for m in log.messages}
        for e in log.wal:
            if e.kind in (WalKind.MESSAGE_SENT.value, WalKind.MESSAGE_RECEIVED.value):
                if e.snapshot is None:
                    raise _Reject(CHAIN_BREAK, f"WAL entry {e.wal_seq} lost its message")
                if e.snapshot not in chain:
                    m = SatpMessage.decode(e.snapshot)
                    if not _forked_out(m, log.messages):
                        raise _Reject(CHAIN_BREAK, f"WAL entry {e.wal_seq} logs a message outside the chain")


def _forked_out(m: SatpMessage, chain: list[SatpMessage]) -> bool:
    """A destination reply later superseded by a rollback notice at the same seq."""
    if m.msg_type not in SENT_BY[Role.DESTINATION] or not 1 <= m.seq <= len(chain):
        return False
    return any(c.msg_type is MsgType.ROLLBACK_NOTICE and c.seq <= m.seq for c in chain)


def _proposal(log: _SessionLog) -> TransferProposal | None:
    if not log.messages or log.messages[0].msg_type is not MsgType.PROPOSAL:
        return None
    try:
        return TransferProposal.from_dict(log.messages[0].payload.get("proposal"))
    except (encoding.DecodeError, TypeError, KeyError) as exc:
        raise _Reject(LEDGER_MISMATCH, f"{log.session_id}: unreadable proposal") from exc


def _check_ledger(logs, ledger) -> None:
    by_net: dict[str, dict[int, LedgerRecord]] = {}
    for net, r in ledger:
        if record_params_hash(net, r) != r.payload_hash:
            raise _Reject(LEDGER_MISMATCH, f"{net} #{r.seq} payload hash does not cover its fields")
        if r.seq in by_net.setdefault(net, {}):
            raise _Reject(LEDGER_MISMATCH, f"{net} #{r.seq} appears twice")
        by_net[net][r.seq] = r
    for log in logs:
        p = _proposal(log)
        if p is not None and p.session_id != log.session_id:
            raise _Reject(LEDGER_MISMATCH, f"{log.session_id}: proposal names {p.session_id}")
        for rc in _receipts_in(log):
            if rc.session_id != log.session_id:
                raise _Reject(LEDGER_MISMATCH, f"receipt for {rc.session_id} in {log.session_id}")
            if p is not None:
                net = p.destination_network if rc.op == LedgerOp.MINT.value else p.origin_network
                if rc.network != net or rc.amount != p.amount:
                    raise _Reject(LEDGER_MISMATCH, f"{rc.op} receipt disagrees with the proposal")
                if rc.op != LedgerOp.MINT.value and rc.asset_id != p.asset_id:
                    raise _Reject(LEDGER_MISMATCH, f"{rc.op} receipt names asset {rc.asset_id}")
            rec = by_net.get(rc.network, {}).get(rc.ledger_seq)
            if rc.network in by_net and rec is None:
                raise _Reject(LEDGER_MISMATCH, f"{rc.network} #{rc.ledger_seq} missing from ledger excerpt")
            if rec is not None:
                same = (rec.op == rc.op and rec.asset_id == rc.asset_id and rec.session_id == rc.session_id
                        and rec.amount == rc.amount and rec.profile_id == rc.profile_id
                        and rec.payload_hash == rc.payload_hash)
                if not same:
                    raise _Reject(LEDGER_MISMATCH, f"{rc.network} #{rc.ledger_seq} differs from its receipt")
        if p is not None:
            for net, records in by_net.items():
                for rec in records.values():
                    if rec.session_id == log.session_id and rec.op in (LedgerOp.LOCK.value, LedgerOp.BURN.value,
                                                                      LedgerOp.MINT.value, LedgerOp.UNLOCK.value):
                        if rec.amount != p.amount:
                            raise _Reject(LEDGER_MISMATCH, f"{net} #{rec.seq} amount {rec.amount} != {p.amount}")


def _check_grammar(logs) -> None:
    for log in logs:
        p = _proposal(log)
        if log.messages and p is None:
            raise _Reject(ILLEGAL_TRANSITION, f"{log.session_id} does not open with a PROPOSAL")
        prev = None
        for m in log.messages:
            if m.msg_type in CONTROL_TYPES or m.msg_type not in legal_successors(prev):
                after = prev.msg_type.value if prev else "start"
                raise _Reject(ILLEGAL_TRANSITION, f"{m.msg_type.value} after {after} in {log.session_id}")
            expected = p.origin_gateway if m.msg_type in SENT_BY[Role.ORIGIN] else p.destination_gateway
            if m.sender != expected:
                raise _Reject(ILLEGAL_TRANSITION, f"{m.msg_type.value} sent by {m.sender}, expected {expected}")
            prev = m


def audit_verify(bundle: bytes, keys: Mapping[str, bytes]) -> AuditResult:
    """Accept or reject a bundle, naming the first failing check."""
    try:
        header, seal, lines, body = _frame(bundle)
        # the seal covers every byte before it, so check it before decoding the rest
        _check_seal(header, seal, body, keys)
        logs, ledger = _parse(lines)
        _check_signatures(logs, keys)
        _check_chains(logs)
        _check_ledger(logs, ledger)
        _check_grammar(logs)
    except _Reject as rej:
        return AuditResult(False, rej.reason, rej.detail)
    return AuditResult(True, sessions=len(logs))


def reseal(bundle: bytes, key) -> bytes:
    """Replace the seal with one by ``key``: models a dishonest exporter
    who edits a bundle and signs the result."""
    lines = bundle.split(b"\n")[:-1]
    body = b"".join(line + b"\n" for line in lines[:-1])
    d = digest(body)
    seal = {"type": "seal", "signer": key.owner, "digest": d, "signature": key.sign(BUNDLE_SEAL_DOMAIN + d)}
    return body + encoding.dump_lines([seal])


def bundle_records(bundle: bytes) -> list[dict[str, Any]]:
    return encoding.load_lines(bundle)
