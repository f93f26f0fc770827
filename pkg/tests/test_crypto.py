import random

import pytest
from hypothesis import given, settings, strategies as st

from flglm import crypto
from flglm.crypto import (AuthenticationError, KeyRing, KeyRotationPolicy, RsaRangeError, SessionCipher, egcd,
                          keygen, keypair_from_primes, modinv, modpow)

import cases
from oracles import RSA_TEXTBOOK as R, inverse_by_search


def test_textbook_values():
    pub, priv = keypair_from_primes(R["p"], R["q"], R["e"])
    assert (pub.n, pub.e) == (R["n"], R["e"])
    assert priv.d == R["d"] == inverse_by_search(R["e"], R["phi"])
    assert priv.d * pub.e % R["phi"] == 1
    assert crypto.rsa_encrypt(pub, R["m"]) == R["c"]
    assert crypto.rsa_decrypt(priv, R["c"]) == R["m"]


def test_rsa_criterion_small():
    r = cases.rsa_checks(n_roundtrips=50, bits=256)
    assert r["textbook"] and r["mr_mismatches"] == 0 and r["roundtrips_ok"] == 50


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**30), st.integers(0, 10**20), st.integers(1, 10**25))
def test_modpow_matches_builtin(b, e, m):
    assert modpow(b, e, m) == pow(b, e, m)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**18), st.integers(1, 10**18))
def test_egcd_bezout(a, b):
    g, x, y = egcd(a, b)
    assert a * x + b * y == g
    assert a % g == 0 and b % g == 0


def test_modinv_errors():
    assert modinv(3, 7) * 3 % 7 == 1
    with pytest.raises(ValueError):
        modinv(6, 9)


def test_exponent_falls_back_to_next_coprime():
    # phi = (7-1)(13-1) = 72; 3 divides it, 5 does not
    pub, priv = keypair_from_primes(7, 13, 3)
    assert pub.e == 5
    assert pub.e * priv.d % 72 == 1


def test_carmichael_numbers_rejected():
    for n in (561, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265):
        assert not crypto.is_probable_prime(n)
    assert crypto.is_probable_prime(2**61 - 1)


def test_keygen_bit_length_and_distinct_primes():
    pub, priv = keygen(256, rng=random.Random(1))
    assert pub.n.bit_length() == 256
    assert pub.e == 65537
    with pytest.raises(ValueError):
        keygen(32)


def test_range_errors():
    pub, priv = keypair_from_primes(61, 53, 17)
    for m in (0, 3233, 5000):
        with pytest.raises(RsaRangeError):
            crypto.rsa_encrypt(pub, m)
    with pytest.raises(RsaRangeError):
        crypto.rsa_decrypt(priv, 0)


def test_textbook_bytes_round_trip():
    pub, priv = keygen(256, rng=random.Random(2))
    for data in (b"", b"\x00", b"\x00\x00abc", bytes(range(200))):
        assert crypto.textbook_decrypt_bytes(priv, crypto.textbook_encrypt_bytes(pub, data)) == data


def test_session_key_wrap_keeps_leading_zeros():
    pub, priv = keygen(512, rng=random.Random(3))
    key = b"\x00\x00" + bytes(range(30))
    assert crypto.unwrap_session_key(priv, crypto.wrap_session_key(pub, key)) == key


def pair():
    k = SessionCipher.fresh_key()
    return SessionCipher(k, role=0), SessionCipher(k, role=1)


def test_seal_open_and_tamper():
    c, s = pair()
    blob = c.seal(b"smashed data")
    assert s.open(blob) == b"smashed data"
    bad = bytearray(c.seal(b"more"))
    bad[-1] ^= 1
    with pytest.raises(AuthenticationError):
        s.open(bytes(bad))


def test_replay_and_reflection_rejected():
    c, s = pair()
    b0, b1 = c.seal(b"a"), c.seal(b"b")
    assert s.open(b1) == b"b"
    with pytest.raises(AuthenticationError):
        s.open(b0)  # counter went backwards
    with pytest.raises(AuthenticationError):
        s.open(b1)  # replay
    with pytest.raises(AuthenticationError):
        c.open(c.seal(b"x"))  # own direction reflected back


def test_rotation_policy():
    p = KeyRotationPolicy(5)
    assert [r for r in range(16) if p.due(r)] == [5, 10, 15]
    assert not any(KeyRotationPolicy(None).due(r) for r in range(50))
    with pytest.raises(ValueError):
        KeyRotationPolicy(0)


def test_keyring_rotation_invalidates_old_private_key():
    ring = KeyRing(512, rng=random.Random(4))
    old_pub = ring.public
    wrapped_old = crypto.wrap_session_key(old_pub, b"k" * 32)
    assert ring.unwrap(wrapped_old) == b"k" * 32
    new_pub = crypto.rotate(KeyRotationPolicy(5), 5, ring)
    assert new_pub is not None and new_pub != old_pub and ring.epoch == 1
    assert crypto.rotate(KeyRotationPolicy(5), 6, ring) is None
    with pytest.raises((AuthenticationError, RsaRangeError, OverflowError)):
        ring.unwrap(wrapped_old)


def test_rotation_through_live_nodes():
    r = cases.rotation_probe(period=5, rsa_bits=512)
    assert r["rotated"] and r["epoch"] == 1
    assert r["old_payload_rejected"] and r["wrong_key_rejected"]
    assert r["old_session_opens"]


def test_crt_decrypt_matches_plain_modpow():
    pub, priv = keygen(512, rng=random.Random(5))
    plain = crypto.RsaPrivateKey(priv.n, priv.d)
    rng = random.Random(6)
    for _ in range(50):
        c = rng.randrange(1, pub.n)
        assert crypto.rsa_decrypt(priv, c) == crypto.rsa_decrypt(plain, c) == pow(c, priv.d, pub.n)
