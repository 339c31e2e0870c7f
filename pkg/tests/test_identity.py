from dataclasses import replace

from satp_gateway.clock import LogicalClock
from satp_gateway.crypto import KeyPair, verify
from satp_gateway.identity import IdentityClient, IdentityProvider


def _pair(**kw):
    clock = LogicalClock()
    key = KeyPair.from_seed("IDP", "identity-provider")
    idp = IdentityProvider(key, clock=clock, **kw)
    return idp, IdentityClient(idp, key.public, clock), clock


def test_attestation_is_signed():
    idp, _, _ = _pair(verdicts={"acct-a": "VERIFIED"})
    att = idp.attest("acct-a")
    assert att.verdict == "VERIFIED"
    assert verify(idp.key.public, att.signing_bytes(), att.signature)
    assert not verify(idp.key.public, replace(att, verdict="BLOCKED").signing_bytes(), att.signature)


def test_default_and_blocked():
    _, client, _ = _pair(verdicts={"acct-b": "BLOCKED"}, default="VERIFIED")
    assert client.verdict("acct-a") == "VERIFIED"
    assert client.verdict("acct-b") == "BLOCKED"


def test_cache_until_expiry():
    idp, client, clock = _pair(ttl=10, default="VERIFIED")
    client.verdict("p")
    client.verdict("p")
    assert idp.calls == 1
    clock.advance_to(10)
    client.verdict("p")
    assert idp.calls == 2


def test_offline_and_forged():
    _, client, _ = _pair(online=False)
    assert client.verdict("p") == "UNAVAILABLE"
    idp, _, clock = _pair(default="VERIFIED")
    wrong = IdentityClient(idp, KeyPair.from_seed("z", "z").public, clock)
    assert wrong.verdict("p") == "UNAVAILABLE"
    assert IdentityClient(None, None, clock).verdict("p") == "UNAVAILABLE"
