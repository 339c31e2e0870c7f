"""Gateway configuration: dataclasses plus a JSON file format.

Example file::

    {
      "gateway_id": "G1",
      "key_seed": "gateway-G1",
      "served_networks": ["N1", "N2"],
      "peers": {"G2": {"endpoint": "http://127.0.0.1:9102", "public_key": "ab12..."}},
      "network_keys": {"N3": "cd34..."},
      "idp": {"id": "IDP", "public_key": "ef56...", "endpoint": "stub"},
      "timeouts": {"retry_base": 4, "retry_max": 32, "retry_cap": 5, "lock_window": 200},
      "wal_path": "state/G1.wal",
      "api1_addr": "127.0.0.1:9001",
      "api2_addr": "127.0.0.1:9101"
    }

``SATP_API1_ADDR``, ``SATP_API2_ADDR`` and ``SATP_PEER_ENDPOINT_<ID>``
override the corresponding fields.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .crypto import KeyPair


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Timeouts:
    retry_base: int = 4      # first retry delay, logical ticks
    retry_max: int = 32      # backoff ceiling
    retry_cap: int = 5       # retries before TIMEOUT (origin, pre-commit) or parking
    lock_window: int = 200   # lock_expiry = start + lock_window

    def delay(self, attempt: int) -> int:
        return min(self.retry_base * 2 ** attempt, self.retry_max)

    def __post_init__(self):
        if min(self.retry_base, self.retry_max, self.lock_window) <= 0 or self.retry_cap < 0:
            raise ConfigError(f"invalid timeouts {self}")


@dataclass(frozen=True)
class PeerInfo:
    public_key: bytes
    endpoint: str = ""


@dataclass
class GatewayConfig:
    gateway_id: str
    key: KeyPair
    served_networks: list[str]
    peers: dict[str, PeerInfo] = field(default_factory=dict)
    network_keys: dict[str, bytes] = field(default_factory=dict)
    idp_id: str = ""
    idp_public_key: bytes | None = None
    idp_endpoint: str = "stub"
    timeouts: Timeouts = field(default_factory=Timeouts)
    wal_path: str | None = None
    api1_addr: str = "127.0.0.1:0"
    api2_addr: str = "127.0.0.1:0"

    def __post_init__(self):
        if self.key.owner != self.gateway_id:
            raise ConfigError(f"key owner {self.key.owner!r} is not {self.gateway_id!r}")
        if not self.served_networks:
            raise ConfigError(f"{self.gateway_id} serves no networks")
        if len(set(self.served_networks)) != len(self.served_networks):
            raise ConfigError(f"{self.gateway_id} lists a served network twice")
        for gid, peer in self.peers.items():
            if not peer.public_key:
                raise ConfigError(f"peer {gid} has no public key")

    def public_keys(self) -> dict[str, bytes]:
        """Every signer this gateway trusts: itself, peers, networks, the IdP."""
        keys = {gid: p.public_key for gid, p in self.peers.items()}
        keys.update(self.network_keys)
        if self.idp_id and self.idp_public_key:
            keys[self.idp_id] = self.idp_public_key
        keys[self.gateway_id] = self.key.public
        return keys

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], env: Mapping[str, str] | None = None) -> "GatewayConfig":
        env = os.environ if env is None else env
        try:
            gid = data["gateway_id"]
            if "key_secret" in data:
                key = KeyPair.from_secret(gid, bytes.fromhex(data["key_secret"]))
            else:
                key = KeyPair.from_seed(gid, data.get("key_seed", f"gateway-{gid}"))
            peers = {}
            for pid, p in data.get("peers", {}).items():
                endpoint = env.get(f"SATP_PEER_ENDPOINT_{pid.upper()}", p.get("endpoint", ""))
                peers[pid] = PeerInfo(bytes.fromhex(p["public_key"]), endpoint)
            idp = data.get("idp", {})
            return cls(
                gateway_id=gid,
                key=key,
                served_networks=list(data["served_networks"]),
                peers=peers,
                network_keys={k: bytes.fromhex(v) for k, v in data.get("network_keys", {}).items()},
                idp_id=idp.get("id", ""),
                idp_public_key=bytes.fromhex(idp["public_key"]) if idp.get("public_key") else None,
                idp_endpoint=idp.get("endpoint", "stub"),
                timeouts=Timeouts(**data.get("timeouts", {})),
                wal_path=data.get("wal_path"),
                api1_addr=env.get("SATP_API1_ADDR", data.get("api1_addr", "127.0.0.1:0")),
                api2_addr=env.get("SATP_API2_ADDR", data.get("api2_addr", "127.0.0.1:0")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad gateway config: {exc!r}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "gateway_id": self.gateway_id,
            "key_secret": self.key.secret.hex(),
            "served_networks": list(self.served_networks),
            "peers": {k: {"public_key": p.public_key.hex(), "endpoint": p.endpoint}
                      for k, p in sorted(self.peers.items())},
            "network_keys": {k: v.hex() for k, v in sorted(self.network_keys.items())},
            "idp": {"id": self.idp_id, "endpoint": self.idp_endpoint,
                    "public_key": self.idp_public_key.hex() if self.idp_public_key else ""},
            "timeouts": asdict(self.timeouts),
            "wal_path": self.wal_path,
            "api1_addr": self.api1_addr,
            "api2_addr": self.api2_addr,
        }


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> GatewayConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return GatewayConfig.from_dict(data, env)
