from hypothesis import given, strategies as st

from satp_gateway.crypto import KeyPair, KeyRing, SUITE, sha256, verify

RFC_SECRET = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
RFC_PUBLIC = "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
RFC_SIG = ("e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065"
           "224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b")


def test_rfc8032_vector():
    kp = KeyPair.from_secret("t", RFC_SECRET)
    assert kp.public.hex() == RFC_PUBLIC
    assert kp.sign(b"").hex() == RFC_SIG
    assert verify(kp.public, b"", bytes.fromhex(RFC_SIG))


def test_fixture_key_derivation():
    kp = KeyPair.from_seed("G1", "gateway-G1")
    assert kp.secret == sha256(b"gateway-G1")
    assert kp.public.hex() == "692bf1637cdb80c63a07d51d77183484fd5efddf97c7c05dcf79e942b3a03479"


def test_suite_name():
    assert SUITE.name == "ed25519-sha256"


@given(st.binary(max_size=64), st.integers(min_value=0, max_value=63), st.integers(min_value=1, max_value=255))
def test_any_signature_bit_flip_fails(data, pos, mask):
    kp = KeyPair.from_seed("x", "x")
    sig = bytearray(kp.sign(data))
    sig[pos] ^= mask
    assert not verify(kp.public, data, bytes(sig))


def test_verify_is_total():
    kp = KeyPair.from_seed("x", "x")
    assert not verify(None, b"m", kp.sign(b"m"))
    assert not verify(b"short", b"m", kp.sign(b"m"))
    assert not verify(kp.public, b"m", b"")
    assert not verify(KeyPair.from_seed("y", "y").public, b"m", kp.sign(b"m"))


def test_keyring_json_roundtrip():
    ring = KeyRing({"a": KeyPair.from_seed("a", "a").public})
    assert KeyRing.from_json(ring.to_json()) == ring
    assert ring.public("missing") is None
