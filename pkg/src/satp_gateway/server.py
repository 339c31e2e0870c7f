"""Live deployment: one gateway process with HTTP endpoints.

API1 (application-facing) and API2 (gateway peering) listen on separate
addresses. Endpoints:

    API1  POST /api1/transfers             TransferRequest JSON -> {"session_id"}
          GET  /api1/transfers/<id>        status JSON
          POST /api1/transfers/<id>/resume operator retry for parked sessions
          POST /api1/preflight             TransferRequest JSON -> ValidationReport
          GET  /api1/export?session=&party=&network=&from=&to=   sealed bundle
          GET  /api1/health
    API2  POST /api2/message               framed SatpMessage -> Ack JSON
          POST /api2/recovery              framed RECOVERY_* message -> Ack JSON

Session ids contain a slash, so clients percent-encode them in paths.

The node file is a gateway config (see ``config``) plus the sections a live
process needs to stand up its simulated networks and identity stub::

    "ledgers":  {"N1": {"notary_seed": "network-N1", "visibility": "PRIVATE",
                        "journal": "state/N1.ledger",
                        "assets": [{"profile_id": "bond-2030", "owner": "acct-alice", "amount": 100}]}},
    "profiles": [<asset profile JSON>, ...],
    "identity": {"key_seed": "identity-provider", "default": "VERIFIED", "verdicts": {}, "ttl": 1000},
    "tick_seconds": 0.05
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Mapping
from urllib.parse import parse_qs, quote, unquote, urlsplit

from .assets import AssetProfile, ProfileRegistry
from .clock import LogicalClock
from .config import ConfigError, GatewayConfig
from .crypto import KeyPair
from .gateway import (
    Gateway,
    PreFlightFailed,
    TransferRequest,
    UnknownPeer,
    UnknownSession,
    UnservedNetwork,
)
from .identity import IdentityClient, IdentityProvider
from .ledger import Ledger, NetworkId, Visibility
from .protocol import CONTROL_TYPES, SatpMessage
from . import encoding
from .recovery import FileWalStore, MemoryWalStore, WriteAheadLog

log = logging.getLogger(__name__)


def split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bad listen address {addr!r}") from None


def session_path(session_id: str) -> str:
    return quote(session_id, safe="")


class HttpTransport:
    """Fire-and-forget POSTs from a background thread.

    The gateway calls ``send`` while holding its own lock; queueing keeps a
    slow or dead peer from stalling it. Lost frames are recovered by the
    gateway's retry timers, so failures are only logged.
    """

    def __init__(self, endpoints: Mapping[str, str], timeout: float = 2.0):
        self.endpoints = dict(endpoints)
        self.timeout = timeout
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, name="satp-sender", daemon=True)
        self._thread.start()

    def send(self, src: str, dst: str, data: bytes) -> None:
        self._queue.put((dst, data))

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join(timeout=self.timeout + 1)

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            dst, data = item
            base = self.endpoints.get(dst)
            if not base:
                log.warning("no endpoint for %s", dst)
                continue
            try:
                msg = SatpMessage.decode(encoding.unframe(data))
                path = "/api2/recovery" if msg.msg_type in CONTROL_TYPES else "/api2/message"
                req = urllib.request.Request(base.rstrip("/") + path, data=data, method="POST",
                                             headers={"Content-Type": "application/octet-stream"})
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    resp.read()
            except urllib.error.HTTPError as exc:
                log.info("peer %s answered %s", dst, exc.code)
            except (OSError, encoding.DecodeError) as exc:
                log.info("send to %s failed: %s", dst, exc)


@dataclass
class NodeConfig:
    gateway: GatewayConfig
    ledgers: dict[str, dict[str, Any]]
    profiles: list[AssetProfile]
    identity: dict[str, Any]
    tick_seconds: float = 0.05

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], env: Mapping[str, str] | None = None) -> "NodeConfig":
        gateway = GatewayConfig.from_dict(data, env)
        ledgers = dict(data.get("ledgers", {}))
        missing = [n for n in gateway.served_networks if n not in ledgers]
        if missing:
            raise ConfigError(f"{gateway.gateway_id}: no ledger section for {missing}")
        try:
            profiles = [AssetProfile.from_json(p) for p in data.get("profiles", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad profile: {exc!r}") from exc
        return cls(gateway, ledgers, profiles, dict(data.get("identity", {})),
                   float(data.get("tick_seconds", 0.05)))


def load_node_config(path: str | Path, env: Mapping[str, str] | None = None) -> NodeConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    base = Path(path).resolve().parent
    # relative state paths are taken relative to the config file
    if data.get("wal_path") and not Path(data["wal_path"]).is_absolute():
        data["wal_path"] = str(base / data["wal_path"])
    for spec in data.get("ledgers", {}).values():
        if spec.get("journal") and not Path(spec["journal"]).is_absolute():
            spec["journal"] = str(base / spec["journal"])
    return NodeConfig.from_dict(data, env)


class GatewayNode:
    """A gateway with its ledgers, identity stub, clock, and HTTP servers."""

    def __init__(self, node: NodeConfig, transport=None):
        cfg = node.gateway
        self.node = node
        self.clock = LogicalClock()
        self.registry = ProfileRegistry(node.profiles)
        self.ledgers: dict[str, Ledger] = {}
        for nid in cfg.served_networks:
            spec = node.ledgers[nid]
            notary = KeyPair.from_seed(nid, spec.get("notary_seed", f"network-{nid}"))
            ledger = Ledger(NetworkId(nid, Visibility(spec.get("visibility", "PRIVATE"))), self.registry,
                            notary, trusted_keys=cfg.network_keys, readers=[cfg.gateway_id],
                            clock=self.clock, journal=spec.get("journal"))
            if not ledger.records:
                for a in spec.get("assets", []):
                    ledger.issue_asset(a["profile_id"], a["owner"], a["amount"])
            self.ledgers[nid] = ledger
        ident = node.identity
        idp_key = KeyPair.from_seed(cfg.idp_id or "IDP", ident.get("key_seed", "identity-provider"))
        provider = IdentityProvider(idp_key, ident.get("verdicts", {}), online=ident.get("online", True),
                                    ttl=ident.get("ttl", 1000), clock=self.clock,
                                    default=ident.get("default", "VERIFIED"))
        identity = IdentityClient(provider, cfg.idp_public_key or idp_key.public, self.clock)
        store = FileWalStore(cfg.wal_path) if cfg.wal_path else MemoryWalStore()
        wal = WriteAheadLog(store, self.clock)
        if wal.entries:
            # resume logical time after the last durable entry
            self.clock.advance_to(max(e.timestamp for e in wal.entries))
        self.transport = transport or HttpTransport({g: p.endpoint for g, p in cfg.peers.items()})
        self.gateway = Gateway(cfg, self.ledgers, self.registry, identity, self.clock, wal, self.transport)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.api1: ThreadingHTTPServer | None = None
        self.api2: ThreadingHTTPServer | None = None

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        self.api1 = ThreadingHTTPServer(split_addr(self.node.gateway.api1_addr), _handler(self, "api1"))
        self.api2 = ThreadingHTTPServer(split_addr(self.node.gateway.api2_addr), _handler(self, "api2"))
        for name, target in (("api1", self.api1.serve_forever), ("api2", self.api2.serve_forever),
                             ("tick", self._tick_loop)):
            t = threading.Thread(target=target, name=f"satp-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("%s: API1 on %s, API2 on %s", self.gateway.id, self.api1_url, self.api2_url)

    @property
    def api1_url(self) -> str:
        host, port = self.api1.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def api2_url(self) -> str:
        host, port = self.api2.server_address[:2]
        return f"http://{host}:{port}"

    def _tick_loop(self) -> None:
        while not self._stop.wait(self.node.tick_seconds):
            self.clock.advance_to(self.clock.now + 1)
            try:
                self.gateway.tick()
            except Exception:  # keep the timer alive; the next tick retries
                log.exception("%s: tick failed", self.gateway.id)

    def stop(self) -> None:
        self._stop.set()
        for server in (self.api1, self.api2):
            if server is not None:
                server.shutdown()
                server.server_close()
        if isinstance(self.transport, HttpTransport):
            self.transport.close()


def _handler(node: GatewayNode, api: str):
    gw = node.gateway

    class Handler(BaseHTTPRequestHandler):
        server_version = "satp-gateway"

        def log_message(self, fmt, *args):
            log.debug("%s %s", gw.id, fmt % args)

        def _reply(self, code: int, body: Any, content_type: str = "application/json") -> None:
            data = body if isinstance(body, bytes) else (json.dumps(body, sort_keys=True) + "\n").encode()
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> bytes:
            return self.rfile.read(int(self.headers.get("Content-Length") or 0))

        def _json(self) -> Any:
            return json.loads(self._body() or b"{}")

        def _parts(self) -> tuple[list[str], dict[str, list[str]]]:
            url = urlsplit(self.path)
            return [unquote(p) for p in url.path.strip("/").split("/")], parse_qs(url.query)

        def do_GET(self):
            parts, query = self._parts()
            if api != "api1" or parts[:1] != ["api1"]:
                return self._reply(404, {"error": "NotFound"})
            if parts[1:] == ["health"]:
                return self._reply(200, {"gateway": gw.id, "now": node.clock.now})
            if len(parts) == 3 and parts[1] == "transfers":
                try:
                    return self._reply(200, gw.api1_get_status(parts[2]))
                except UnknownSession:
                    return self._reply(404, {"error": "UnknownSession", "session_id": parts[2]})
            if parts[1:] == ["export"]:
                one = {k: v[0] for k, v in query.items()}
                time_range = None
                if "from" in one or "to" in one:
                    time_range = (int(one.get("from", 0)), int(one.get("to", 2**62)))
                bundle = gw.export_transaction_history(one.get("party"), one.get("session"),
                                                       one.get("network"), time_range)
                return self._reply(200, bundle, "application/x-ndjson")
            return self._reply(404, {"error": "NotFound"})

        def do_POST(self):
            parts, _ = self._parts()
            try:
                if api == "api2":
                    return self._api2(parts)
                if parts[:1] != ["api1"]:
                    return self._reply(404, {"error": "NotFound"})
                if parts[1:] == ["transfers"]:
                    request = TransferRequest.from_dict(self._json())
                    return self._reply(201, {"session_id": gw.api1_initiate_transfer(request)})
                if parts[1:] == ["preflight"]:
                    return self._reply(200, gw.api1_pre_flight(TransferRequest.from_dict(self._json())).to_dict())
                if len(parts) == 4 and parts[1] == "transfers" and parts[3] == "resume":
                    return self._reply(200, {"sessions": gw.resume(parts[2])})
                return self._reply(404, {"error": "NotFound"})
            except PreFlightFailed as exc:
                return self._reply(422, {"error": "PreFlightFailed", "report": exc.report.to_dict()})
            except UnknownSession as exc:
                return self._reply(404, {"error": "UnknownSession", "detail": str(exc)})
            except (UnknownPeer, UnservedNetwork) as exc:
                return self._reply(400, {"error": type(exc).__name__, "detail": str(exc)})
            except (ValueError, TypeError, json.JSONDecodeError) as exc:
                return self._reply(400, {"error": "BadRequest", "detail": str(exc)})

        def _api2(self, parts: list[str]):
            if parts not in (["api2", "message"], ["api2", "recovery"]):
                return self._reply(404, {"error": "NotFound"})
            raw = self._body()
            if parts[1] == "recovery":
                try:
                    if SatpMessage.decode(encoding.unframe(raw)).msg_type not in CONTROL_TYPES:
                        return self._reply(400, {"ok": False, "error": "UnexpectedMessage",
                                                 "detail": "not a recovery message"})
                except encoding.DecodeError as exc:
                    return self._reply(400, {"ok": False, "error": "DecodeError", "detail": str(exc)})
            ack = gw.api2_receive_message(raw)
            return self._reply(200 if ack.ok else 400, ack.to_dict())

    return Handler


# -- small API1 client, used by the CLI -----------------------------------------

def api1_call(base: str, method: str, path: str, body: Any = None, timeout: float = 5.0) -> tuple[int, Any]:
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(base.rstrip("/") + path, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw, code, ctype = resp.read(), resp.status, resp.headers.get("Content-Type", "")
    except urllib.error.HTTPError as exc:
        raw, code, ctype = exc.read(), exc.code, exc.headers.get("Content-Type", "")
    if ctype.startswith("application/json"):
        return code, json.loads(raw or b"null")
    return code, raw
