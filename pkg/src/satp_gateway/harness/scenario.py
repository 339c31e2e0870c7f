"""Scenario files (JSON, schema ``satp-scenario/1``) and fault specifications.

A scenario names networks with their initial assets, gateways with the
networks they serve, identity-provider verdicts, timed transfer requests
and faults. Issued asset ids are deterministic (``<network>:<nnnnn>`` in
issue order), so transfers can refer to them directly.
"""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from ..assets import AssetProfile
from ..config import Timeouts

SCHEMA = "satp-scenario/1"


class ScenarioError(ValueError):
    pass


class FaultKind(str, enum.Enum):
    CRASH_GATEWAY = "CRASH_GATEWAY"
    RESTART_GATEWAY = "RESTART_GATEWAY"
    DROP_MESSAGE = "DROP_MESSAGE"
    DELAY_MESSAGE = "DELAY_MESSAGE"
    DUPLICATE_MESSAGE = "DUPLICATE_MESSAGE"
    PARTITION = "PARTITION"
    HEAL = "HEAL"


@dataclass
class FaultSpec:
    kind: FaultKind
    target: str = ""                 # gateway id; for PARTITION/HEAL "G1,G2"
    at: int | None = None            # logical time
    anchor: str | None = None        # protocol-step anchor, e.g. "wal:COMMIT_POINT:PREPARED#1"
    restart_after: int | None = None  # CRASH_GATEWAY: ticks until an automatic restart
    msg_type: str | None = None      # message predicate
    session: str | None = None
    seq: int | None = None
    delay: int = 5                   # DELAY_MESSAGE
    count: int = 1                   # message faults: how many matches to affect

    def __post_init__(self):
        self.kind = FaultKind(self.kind)
        if self.kind is FaultKind.CRASH_GATEWAY and (self.at is None) == (self.anchor is None):
            raise ScenarioError("CRASH_GATEWAY needs exactly one of 'at' or 'anchor'")
        if self.kind in (FaultKind.RESTART_GATEWAY, FaultKind.PARTITION, FaultKind.HEAL) and self.at is None:
            raise ScenarioError(f"{self.kind.value} needs 'at'")

    @property
    def message_fault(self) -> bool:
        return self.kind in (FaultKind.DROP_MESSAGE, FaultKind.DELAY_MESSAGE, FaultKind.DUPLICATE_MESSAGE)

    def matches(self, src: str, dst: str, msg_type: str, session: str, seq: int) -> bool:
        if self.target and self.target not in (src, dst):
            return False
        return ((self.msg_type is None or self.msg_type == msg_type)
                and (self.session is None or self.session == session)
                and (self.seq is None or self.seq == seq))

    def to_dict(self) -> dict[str, Any]:
        data = {k: v for k, v in asdict(self).items() if v is not None}
        data["kind"] = self.kind.value
        return data


@dataclass
class Chaos:
    """Random message faults applied to every send."""
    drop: float = 0.0
    duplicate: float = 0.0
    delay: float = 0.0
    max_delay: int = 8


@dataclass
class NetworkSpec:
    id: str
    visibility: str = "PRIVATE"
    assets: list[dict[str, Any]] = field(default_factory=list)  # {profile_id, owner, amount}


@dataclass
class GatewaySpec:
    gateway_id: str
    served_networks: list[str]
    key_seed: str | None = None
    timeouts: Timeouts = field(default_factory=Timeouts)


@dataclass
class TransferSpec:
    at: int
    gateway: str
    request: dict[str, Any]


@dataclass
class Scenario:
    networks: list[NetworkSpec]
    gateways: list[GatewaySpec]
    profiles: list[AssetProfile]
    transfers: list[TransferSpec] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    seed: int = 0
    max_logical_time: int = 5000
    latency: int = 1
    chaos: Chaos = field(default_factory=Chaos)
    identity: dict[str, Any] = field(default_factory=dict)  # {default, verdicts, online, ttl}
    client_patience: int = 50
    operator_resume: bool = False
    duplicate_delivery: bool = False
    duplicate_ledger_calls: bool = False
    name: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        nets = [n.id for n in self.networks]
        if len(set(nets)) != len(nets):
            raise ScenarioError("duplicate network id")
        gws = [g.gateway_id for g in self.gateways]
        if len(set(gws)) != len(gws):
            raise ScenarioError("duplicate gateway id")
        profiles = {p.profile_id for p in self.profiles}
        for n in self.networks:
            for a in n.assets:
                if a.get("profile_id") not in profiles:
                    raise ScenarioError(f"asset on {n.id} uses unknown profile {a.get('profile_id')!r}")
        bound: dict[str, str] = {}
        for g in self.gateways:
            for n in g.served_networks:
                if n not in nets:
                    raise ScenarioError(f"{g.gateway_id} serves unknown network {n}")
                if n in bound:
                    raise ScenarioError(f"network {n} bound to both {bound[n]} and {g.gateway_id}")
                bound[n] = g.gateway_id
        for t in self.transfers:
            if t.gateway not in gws:
                raise ScenarioError(f"transfer submitted to unknown gateway {t.gateway}")
        for f in self.faults:
            for target in filter(None, f.target.split(",")):
                if target not in gws:
                    raise ScenarioError(f"fault targets unknown gateway {target}")

    def network_owner(self) -> dict[str, str]:
        return {n: g.gateway_id for g in self.gateways for n in g.served_networks}

    def replace(self, **changes) -> "Scenario":
        clone = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(clone, k, v)
        clone.validate()
        return clone

    # -- file format ---------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        if not isinstance(data, dict):
            raise ScenarioError("a scenario must be a JSON object")
        if data.get("schema") != SCHEMA:
            raise ScenarioError(f"expected schema {SCHEMA!r}, got {data.get('schema')!r}")
        try:
            return cls(
                name=data.get("name", ""),
                networks=[NetworkSpec(**n) for n in data["networks"]],
                gateways=[GatewaySpec(g["gateway_id"], list(g["served_networks"]), g.get("key_seed"),
                                      Timeouts(**g.get("timeouts", {}))) for g in data["gateways"]],
                profiles=[AssetProfile.from_json(p) for p in data["profiles"]],
                transfers=[TransferSpec(**t) for t in data.get("transfers", [])],
                faults=[FaultSpec(**f) for f in data.get("faults", [])],
                seed=int(data.get("seed", 0)),
                max_logical_time=int(data.get("max_logical_time", 5000)),
                latency=int(data.get("latency", 1)),
                chaos=Chaos(**data.get("chaos", {})),
                identity=dict(data.get("identity", {})),
                client_patience=int(data.get("client_patience", 50)),
                operator_resume=bool(data.get("operator_resume", False)),
                duplicate_delivery=bool(data.get("duplicate_delivery", False)),
                duplicate_ledger_calls=bool(data.get("duplicate_ledger_calls", False)),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad scenario: {exc!r}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "seed": self.seed,
            "max_logical_time": self.max_logical_time,
            "latency": self.latency,
            "profiles": [p.to_json() for p in self.profiles],
            "networks": [asdict(n) for n in self.networks],
            "gateways": [{"gateway_id": g.gateway_id, "served_networks": g.served_networks,
                          **({"key_seed": g.key_seed} if g.key_seed else {}),
                          "timeouts": asdict(g.timeouts)} for g in self.gateways],
            "identity": self.identity,
            "transfers": [asdict(t) for t in self.transfers],
            "faults": [f.to_dict() for f in self.faults],
            "chaos": asdict(self.chaos),
            "client_patience": self.client_patience,
            "operator_resume": self.operator_resume,
            "duplicate_delivery": self.duplicate_delivery,
            "duplicate_ledger_calls": self.duplicate_ledger_calls,
        }


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path} is not valid JSON: {exc}") from exc
    return Scenario.from_dict(data)


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n")


# -- builders used by tests, scripts and the fuzz campaign ----------------------

DEFAULT_PROFILE = AssetProfile(
    profile_id="bond-2030",
    asset_class="tokenized-bond",
    schema_version="1.0",
    base_unit="unit",
    divisibility=0,
    issuer_id="issuer-1",
    jurisdiction="EU",
)


def full_travel_rule(originator: str = "alice", beneficiary: str = "bob") -> dict[str, str]:
    return {
        "originator_name": originator.capitalize(),
        "originator_account": f"acct-{originator}",
        "originator_address_or_id": f"1 Main St / {originator}",
        "beneficiary_name": beneficiary.capitalize(),
        "beneficiary_account": f"acct-{beneficiary}",
    }


def transfer_request(origin_network: str, asset_id: str, destination_network: str,
                     destination_gateway: str, amount: int = 100, request_id: str | None = None,
                     originator: str = "alice", beneficiary: str = "bob",
                     travel_rule: dict[str, str] | None = None) -> dict[str, Any]:
    return {
        "origin_network": origin_network,
        "asset_id": asset_id,
        "amount": amount,
        "destination_network": destination_network,
        "destination_gateway": destination_gateway,
        "beneficiary": f"acct-{beneficiary}",
        "travel_rule": travel_rule if travel_rule is not None else full_travel_rule(originator, beneficiary),
        "request_id": request_id,
    }


def happy_path(amount: int = 100, seed: int = 0) -> Scenario:
    """Two networks, two gateways, one asset, one transfer."""
    return Scenario(
        name="happy-path",
        seed=seed,
        profiles=[DEFAULT_PROFILE],
        networks=[
            NetworkSpec("N1", assets=[{"profile_id": DEFAULT_PROFILE.profile_id, "owner": "acct-alice",
                                       "amount": amount}]),
            NetworkSpec("N2"),
        ],
        gateways=[GatewaySpec("G1", ["N1"]), GatewaySpec("G2", ["N2"])],
        transfers=[TransferSpec(0, "G1", transfer_request("N1", "N1:00001", "N2", "G2", amount,
                                                          request_id="tx1"))],
        identity={"default": "VERIFIED"},
    )


def peer_unreachable(down_for: int = 400) -> Scenario:
    """The destination dies once the origin has locked, and stays down past
    the retry cap and the lock window: the origin must roll back alone."""
    sc = happy_path()
    return sc.replace(name="peer-unreachable", faults=[
        FaultSpec(FaultKind.CRASH_GATEWAY, target="G2", anchor="recv:LOCK_ASSERTION#1", restart_after=down_for),
    ])


def travel_rule_gap(missing: str) -> Scenario:
    """Happy path whose Travel Rule payload omits one field."""
    sc = happy_path()
    rule = full_travel_rule()
    if missing not in rule:
        raise ScenarioError(f"unknown Travel Rule field {missing!r}")
    rule[missing] = ""
    request = transfer_request("N1", "N1:00001", "N2", "G2", 100, request_id="tx1", travel_rule=rule)
    return sc.replace(name=f"travel-rule-without-{missing}", transfers=[TransferSpec(0, "G1", request)])


def duplicated_happy_path() -> Scenario:
    """Every message delivered twice, every ledger command issued twice."""
    return happy_path().replace(name="duplicated", duplicate_delivery=True, duplicate_ledger_calls=True)


def multi_network_gsp(per_pair: int = 10, seed: int = 0) -> Scenario:
    """G serves N1, N2, N3; H serves N4. Each of G's networks sends
    ``per_pair`` transfers to N4, all submitted at once."""
    origins = ["N1", "N2", "N3"]
    networks = [NetworkSpec(n, assets=[{"profile_id": DEFAULT_PROFILE.profile_id, "owner": "acct-alice",
                                        "amount": 10 * (i + 1)} for i in range(per_pair)])
                for n in origins]
    networks.append(NetworkSpec("N4"))
    transfers = [TransferSpec(0, "G", transfer_request(n, f"{n}:{i + 1:05d}", "N4", "H", 10 * (i + 1),
                                                       request_id=f"{n.lower()}-{i + 1}"))
                 for i in range(per_pair) for n in origins]
    return Scenario(
        name="multi-network-gsp",
        seed=seed,
        profiles=[DEFAULT_PROFILE],
        networks=networks,
        gateways=[GatewaySpec("G", origins), GatewaySpec("H", ["N4"])],
        transfers=transfers,
        identity={"default": "VERIFIED"},
    )


def blocked_beneficiary() -> Scenario:
    """The identity provider lists the beneficiary as blocked."""
    return happy_path().replace(name="blocked-beneficiary",
                                identity={"default": "VERIFIED", "verdicts": {"acct-bob": "BLOCKED"}})
