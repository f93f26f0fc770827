"""Independent reference computations used by the tests.

Nothing here imports the package under test except where an oracle must
drive it (the loop-of-solo and finite-difference helpers). Frozen values
were computed once from these functions and are kept as literals in the
tests so a regression in either side is caught.
"""

from __future__ import annotations

import math
import struct

import numpy as np


# ---------------------------------------------------------------- numerics


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f(x) / dx by central differences; ``f`` maps an array to a float."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    num = np.abs(a - b).max(initial=0.0)
    den = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(num / den)


def softmax_ref(x) -> list[float]:
    e = [math.exp(v) for v in x]
    s = sum(e)
    return [v / s for v in e]


# ---------------------------------------------------------------- number theory


def sieve(limit: int) -> set[int]:
    flags = bytearray([1]) * limit
    flags[0:2] = b"\x00\x00"
    for i in range(2, int(limit ** 0.5) + 1):
        if flags[i]:
            flags[i * i::i] = bytearray(len(flags[i * i::i]))
    return {i for i, f in enumerate(flags) if f}


def inverse_by_search(e: int, phi: int) -> int:
    """Brute-force modular inverse, fine for textbook-size moduli."""
    for d in range(1, phi):
        if d * e % phi == 1:
            return d
    raise ValueError("no inverse")


# ---------------------------------------------------------------- wire


def tensor_record_ref(values, shape, dtype_code: int = 1) -> bytes:
    """dtype u8, ndim u8, dims u32 LE, then little-endian float32 data."""
    out = struct.pack("<BB", dtype_code, len(shape)) + b"".join(struct.pack("<I", d) for d in shape)
    return out + struct.pack(f"<{len(values)}f", *values)


# ---------------------------------------------------------------- overlap metrics


def rouge1_ref(cand: list[str], ref: list[str]) -> float:
    common = sum(min(cand.count(w), ref.count(w)) for w in set(cand))
    if not common:
        return 0.0
    p, r = common / len(cand), common / len(ref)
    return 2 * p * r / (p + r)


# ---------------------------------------------------------------- frozen literals

RSA_TEXTBOOK = {"p": 61, "q": 53, "e": 17, "n": 3233, "phi": 3120, "d": 2753, "m": 65, "c": 2790}
GOLDEN_TENSOR_2X2 = bytes.fromhex("01020200000002000000" "0000803f" "00000040" "00004040" "00008040")
SOFTMAX_LN = [1 / 6, 2 / 6, 3 / 6]
