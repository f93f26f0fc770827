"""Synthetic tasks and client data partitioning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import IGNORE_INDEX

PAD, BOS, SEP, MASK = 0, 1, 2, 3
N_SPECIAL = 4


@dataclass
class Sample:
    ids: np.ndarray          # model input, (L,)
    targets: np.ndarray      # next-token targets, IGNORE_INDEX where unscored
    label: int | None = None


def copy_task(n: int, seed: int = 0, length: int = 6, n_symbols: int = 8, vocab_size: int = 256) -> list[Sample]:
    """``BOS s1..sk SEP s1..sk``; only the copied half is scored."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = rng.integers(N_SPECIAL, N_SPECIAL + n_symbols, size=length)
        seq = np.concatenate([[BOS], s, [SEP], s])
        ids, tg = seq[:-1], seq[1:].copy()
        tg[: length] = IGNORE_INDEX
        out.append(Sample(ids.astype(np.int64), tg.astype(np.int64)))
    return out


LABEL_TOKENS = (N_SPECIAL, N_SPECIAL + 1)


def cloze_classification(n: int = 400, seed: int = 0, length: int = 8, n_pos: int | None = None,
                         vocab_size: int = 256) -> list[Sample]:
    """Binary task posed as blank infilling: ``BOS x1..xk MASK`` -> label token.

    The label is 1 when most body tokens come from the upper half of the
    symbol range. ``n_pos`` fixes the class balance (default 205 of 400).
    """
    rng = np.random.default_rng(seed)
    lo, hi = N_SPECIAL + 2, vocab_size
    mid = (lo + hi) // 2
    n_pos = round(n * 205 / 400) if n_pos is None else n_pos
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    out = []
    for y in labels:
        k_major = rng.integers(length // 2 + 1, length + 1)
        major = rng.integers(mid, hi, size=k_major) if y else rng.integers(lo, mid, size=k_major)
        minor = rng.integers(lo, mid, size=length - k_major) if y else rng.integers(mid, hi, size=length - k_major)
        body = rng.permutation(np.concatenate([major, minor]))
        ids = np.concatenate([[BOS], body, [MASK]]).astype(np.int64)
        tg = np.full(len(ids), IGNORE_INDEX, dtype=np.int64)
        tg[-1] = LABEL_TOKENS[y]
        out.append(Sample(ids, tg, int(y)))
    return out


def zipf_corpus(n: int, seed: int = 0, length: int = 16, vocab_size: int = 256, exponent: float = 1.1,
                rank_seed: int = 1234) -> list[np.ndarray]:
    """Sentences of i.i.d. tokens with a Zipfian unigram law.

    ``rank_seed`` fixes which token gets which frequency rank, so disjoint
    shards drawn with different ``seed`` share a distribution.
    """
    v = vocab_size - N_SPECIAL
    ranks = np.arange(1, v + 1, dtype=np.float64)
    p = ranks ** -exponent
    p /= p.sum()
    order = np.random.default_rng(rank_seed).permutation(v) + N_SPECIAL
    rng = np.random.default_rng(seed)
    return [order[rng.choice(v, size=length, p=p)].astype(np.int64) for _ in range(n)]


# ---------------------------------------------------------------- partitioning


class PartitionError(ValueError):
    pass


@dataclass
class DataPartition:
    mode: str
    indices: list[list[int]] = field(default_factory=list)

    def shard(self, data, client: int):
        return [data[i] for i in self.indices[client]]

    def check(self, n: int) -> None:
        flat = [i for part in self.indices for i in part]
        if len(flat) != len(set(flat)) or set(flat) != set(range(n)):
            raise PartitionError("partition is not a disjoint cover of the dataset")


def partition(labels, mode: str, n_clients: int, seed: int = 0,
              fractions: dict | None = None) -> DataPartition:
    """Split sample indices across clients.

    ``iid``: shuffle and deal into near-equal shards.
    ``label_skew``: ``fractions[label]`` lists the share of that label each
    client receives; each list must sum to 1.
    """
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    if mode == "iid":
        perm = rng.permutation(n)
        parts = [sorted(p.tolist()) for p in np.array_split(perm, n_clients)]
        return DataPartition("iid", parts)
    if mode != "label_skew":
        raise PartitionError(f"unknown partition mode {mode!r}")
    if not fractions:
        raise PartitionError("label_skew needs per-label fractions")
    parts: list[list[int]] = [[] for _ in range(n_clients)]
    for lab in sorted(set(labels.tolist())):
        fr = fractions.get(lab, fractions.get(str(lab)))
        if fr is None or len(fr) != n_clients:
            raise PartitionError(f"label {lab}: need {n_clients} fractions")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise PartitionError(f"label {lab}: fractions sum to {sum(fr)}, not 1")
        idx = rng.permutation(np.nonzero(labels == lab)[0])
        counts = [int(round(f * len(idx))) for f in fr]
        counts[-1] = len(idx) - sum(counts[:-1])
        if counts[-1] < 0:
            raise PartitionError(f"label {lab}: rounding left a negative share")
        start = 0
        for c, k in enumerate(counts):
            parts[c].extend(idx[start:start + k].tolist())
            start += k
    return DataPartition("label_skew", [sorted(p) for p in parts])


def copa_skew_fractions(n_zero: int = 195, n_one: int = 205, minority: int = 5) -> dict:
    """Two-client skew: client A gets every 0 and ``minority`` ones, B the rest."""
    return {0: [1.0, 0.0], 1: [minority / n_one, 1 - minority / n_one]}
