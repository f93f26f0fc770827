"""RSA key generation and encryption, plus an AEAD session cipher for tensors.

RSA is implemented directly on Python integers: square-and-multiply
exponentiation, Miller-Rabin primality, extended Euclid for the private
exponent. Bulk payloads are sealed with AES-256-GCM under a session key
that travels RSA-encrypted.
"""

from __future__ import annotations

import math
import os
import random
import secrets
import struct
import threading
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

DEFAULT_E = 65537
MR_ROUNDS = 40

_SMALL_PRIMES = [p for p in range(3, 2000) if all(p % q for q in range(2, int(p**0.5) + 1))]


class RsaRangeError(ValueError):
    """Message integer outside (0, n)."""


class AuthenticationError(Exception):
    """Sealed payload failed authentication (tampered, wrong key or replayed)."""


def modpow(base: int, exp: int, mod: int) -> int:
    """Left-to-right square-and-multiply."""
    if mod == 1:
        return 0
    if exp < 0:
        raise ValueError("negative exponent")
    result = 1
    base %= mod
    for bit in bin(exp)[2:]:
        result = result * result % mod
        if bit == "1":
            result = result * base % mod
    return result


def egcd(a: int, b: int) -> tuple[int, int, int]:
    """Return (g, x, y) with a*x + b*y == g == gcd(a, b)."""
    x0, x1, y0, y1 = 1, 0, 0, 1
    while b:
        q, a, b = a // b, b, a % b
        x0, x1 = x1, x0 - q * x1
        y0, y1 = y1, y0 - q * y1
    return a, x0, y0


def modinv(a: int, m: int) -> int:
    g, x, _ = egcd(a % m, m)
    if g != 1:
        raise ValueError(f"{a} has no inverse modulo {m}")
    return x % m


def is_probable_prime(n: int, rounds: int = MR_ROUNDS, rng: random.Random | None = None) -> bool:
    if n < 2:
        return False
    for p in (2, *_SMALL_PRIMES):
        if n == p:
            return True
        if n % p == 0:
            return False
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    rand = rng or random.SystemRandom()
    for _ in range(rounds):
        a = rand.randrange(2, n - 1)
        x = modpow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: random.Random | None = None) -> int:
    rand = rng or random.SystemRandom()
    while True:
        cand = rand.getrandbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if is_probable_prime(cand, rng=rand):
            return cand


@dataclass(frozen=True)
class RsaPublicKey:
    n: int
    e: int

    def to_hex(self) -> str:
        return f"n={self.n:x}\ne={self.e:x}\n"


@dataclass
class RsaPrivateKey:
    n: int
    d: int
    p: int = 0   # primes kept for CRT decryption; 0 means plain modpow
    q: int = 0

    def zeroize(self) -> None:
        # Python ints are immutable; dropping the references is the best we can do.
        self.d = self.n = self.p = self.q = 0


def keypair_from_primes(p: int, q: int, e: int = DEFAULT_E) -> tuple[RsaPublicKey, RsaPrivateKey]:
    if p == q:
        raise ValueError("p and q must be distinct")
    n = p * q
    phi = (p - 1) * (q - 1)
    while math.gcd(e, phi) != 1:
        e += 2
    if not 1 < e < phi:
        raise ValueError(f"no valid public exponent below phi={phi}")
    d = modinv(e, phi)
    return RsaPublicKey(n, e), RsaPrivateKey(n, d, p, q)


def keygen(bit_length: int = 2048, e: int = DEFAULT_E, rng: random.Random | None = None):
    """Generate an RSA keypair whose modulus has ``bit_length`` bits.

    Pass a seeded ``random.Random`` for reproducible tests; the default is
    the OS CSPRNG.
    """
    if bit_length < 64:
        raise ValueError("bit_length must be >= 64")
    rand = rng or random.SystemRandom()
    half = bit_length // 2
    while True:
        p = random_prime(half, rand)
        q = random_prime(bit_length - half, rand)
        if p == q:
            continue
        phi = (p - 1) * (q - 1)
        ee = e
        while math.gcd(ee, phi) != 1:
            ee += 2
        if ee >= phi:
            continue
        return keypair_from_primes(p, q, ee)


def rsa_encrypt(pub: RsaPublicKey, m: int) -> int:
    if not 0 < m < pub.n:
        raise RsaRangeError(f"message integer must satisfy 0 < m < n")
    return modpow(m, pub.e, pub.n)


def rsa_decrypt(priv: RsaPrivateKey, c: int) -> int:
    if not 0 < c < priv.n:
        raise RsaRangeError("ciphertext integer must satisfy 0 < c < n")
    if not priv.p:
        return modpow(c, priv.d, priv.n)
    # CRT: two half-size exponentiations, then Garner recombination
    p, q = priv.p, priv.q
    mp = modpow(c, priv.d % (p - 1), p)
    mq = modpow(c, priv.d % (q - 1), q)
    h = modinv(q, p) * (mp - mq) % p
    return mq + h * q


# ------------------------------------------------------------ textbook chunks
# Deterministic, not semantically secure. Kept for fidelity checks only.


def _chunk_len(n: int) -> int:
    return max(1, min(8, (n.bit_length() - 2) // 8))


def textbook_encrypt_bytes(pub: RsaPublicKey, data: bytes) -> bytes:
    """Raw RSA over chunks of up to 8 bytes, each prefixed with a 1-bit marker."""
    k = _chunk_len(pub.n)
    width = (pub.n.bit_length() + 7) // 8
    out = [struct.pack("<Q", len(data))]
    for i in range(0, len(data), k):
        chunk = data[i:i + k]
        m = (1 << (8 * len(chunk))) | int.from_bytes(chunk, "little")
        out.append(rsa_encrypt(pub, m).to_bytes(width, "little"))
    return b"".join(out)


def textbook_decrypt_bytes(priv: RsaPrivateKey, blob: bytes) -> bytes:
    k = _chunk_len(priv.n)
    width = (priv.n.bit_length() + 7) // 8
    (total,) = struct.unpack_from("<Q", blob, 0)
    out = bytearray()
    off = 8
    while len(out) < total:
        c = int.from_bytes(blob[off:off + width], "little")
        off += width
        m = rsa_decrypt(priv, c)
        size = min(k, total - len(out))
        out += (m & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
    return bytes(out)


# ------------------------------------------------------------ session cipher

SESSION_KEY_BYTES = 32
NONCE_BYTES = 12


def wrap_session_key(pub: RsaPublicKey, key: bytes) -> int:
    # Leading 0x01 keeps m > 0 and preserves leading zero bytes of the key.
    m = int.from_bytes(b"\x01" + key, "big")
    return rsa_encrypt(pub, m)


def unwrap_session_key(priv: RsaPrivateKey, wrapped: int) -> bytes:
    m = rsa_decrypt(priv, wrapped)
    raw = m.to_bytes(SESSION_KEY_BYTES + 1, "big")
    if raw[0] != 1:
        raise AuthenticationError("session key unwrap produced malformed key")
    return raw[1:]


class SessionCipher:
    """AES-GCM with a per-direction monotonic counter nonce.

    ``role`` (0 client, 1 server) goes into the nonce so the two directions
    never collide under the shared key. Openers reject counters that do not
    increase, which also rejects replays.
    """

    def __init__(self, key: bytes, role: int, epoch: int = 0):
        if len(key) != SESSION_KEY_BYTES:
            raise ValueError("session key must be 32 bytes")
        self._aead = AESGCM(key)
        self.role = role
        self.epoch = epoch
        self._send_ctr = 0
        self._recv_ctr = -1
        self._lock = threading.Lock()

    @classmethod
    def fresh_key(cls) -> bytes:
        return secrets.token_bytes(SESSION_KEY_BYTES)

    def seal(self, plaintext: bytes, aad: bytes = b"") -> bytes:
        with self._lock:
            ctr = self._send_ctr
            self._send_ctr += 1
        nonce = struct.pack("<BxxxQ", self.role, ctr)
        return nonce + self._aead.encrypt(nonce, bytes(plaintext), aad)

    def open(self, blob: bytes, aad: bytes = b"") -> bytes:
        if len(blob) < NONCE_BYTES + 16:
            raise AuthenticationError("sealed payload too short")
        nonce = bytes(blob[:NONCE_BYTES])
        role, ctr = struct.unpack("<BxxxQ", nonce)
        if role == self.role:
            raise AuthenticationError("payload was sealed by this side")
        try:
            plain = self._aead.decrypt(nonce, bytes(blob[NONCE_BYTES:]), aad)
        except InvalidTag:
            raise AuthenticationError("payload authentication failed") from None
        with self._lock:
            if ctr <= self._recv_ctr:
                raise AuthenticationError(f"replayed or reordered payload (counter {ctr})")
            self._recv_ctr = ctr
        return plain


class NullCipher:
    """Pass-through used when sealing is disabled for debugging."""

    epoch = 0

    def seal(self, plaintext: bytes, aad: bytes = b"") -> bytes:
        return bytes(plaintext)

    def open(self, blob: bytes, aad: bytes = b"") -> bytes:
        return bytes(blob)


def seal_payload(session, data: bytes) -> bytes:
    return session.seal(data)


def open_payload(session, blob: bytes) -> bytes:
    return session.open(blob)


@dataclass(frozen=True)
class KeyRotationPolicy:
    """Regenerate keys when ``round % period == 0``; ``period=None`` means never."""

    period: int | None = 100

    def __post_init__(self):
        if self.period is not None and self.period < 1:
            raise ValueError("rotation period must be >= 1")

    def due(self, round_: int) -> bool:
        return self.period is not None and round_ > 0 and round_ % self.period == 0


class KeyRing:
    """Client-side holder of the current RSA keypair; rotation swaps it atomically."""

    def __init__(self, bits: int = 2048, rng: random.Random | None = None):
        self.bits = bits
        self._rng = rng
        self._lock = threading.Lock()
        self.epoch = 0
        self.public, self._private = keygen(bits, rng=rng)

    def rotate(self) -> RsaPublicKey:
        pub, priv = keygen(self.bits, rng=self._rng)
        with self._lock:
            old = self._private
            self.public, self._private = pub, priv
            self.epoch += 1
        old.zeroize()
        return pub

    def unwrap(self, wrapped: int) -> bytes:
        with self._lock:
            priv = self._private
        return unwrap_session_key(priv, wrapped)


def rotate(policy: KeyRotationPolicy, round_: int, ring: KeyRing) -> RsaPublicKey | None:
    """Rotate ``ring`` if the policy says this round is due; return the new public key."""
    if policy.due(round_):
        return ring.rotate()
    return None


def os_seed_rng() -> random.Random:
    return random.Random(int.from_bytes(os.urandom(8), "little"))
