"""Blank-infilling scores and text-overlap metrics.

All metrics are fractions in [0, 1]. Text inputs are whitespace-tokenised
and lower-cased; token-id sequences are used as given.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

LogitsFn = Callable[[np.ndarray], np.ndarray]


class ContractError(ValueError):
    pass


def tokenize(text) -> list:
    if isinstance(text, str):
        return text.lower().split()
    return list(text)


def _log_softmax(row: np.ndarray) -> np.ndarray:
    s = row - row.max()
    return s - math.log(np.exp(s).sum())


# ---------------------------------------------------------------- model scoring


def model_logits_fn(model) -> LogitsFn:
    from .tensor import no_grad

    def fn(ids):
        with no_grad():
            return model.forward(np.asarray(ids)).data

    return fn


def split_logits_fn(front, body, tail) -> LogitsFn:
    from .split import split_logits

    return lambda ids: split_logits(front, body, tail, np.asarray(ids))


def label_prob(logits_fn: LogitsFn, x: Sequence[int], answers: Sequence[Sequence[int]]) -> np.ndarray:
    """p(y|x) over the label set: next-token probability of each single-token
    answer after ``x``, renormalised over the answers only."""
    for a in answers:
        if len(a) != 1:
            raise ContractError(f"label_prob needs single-token answers, got {list(a)}; use multi_token_score")
    logits = np.asarray(logits_fn(np.asarray(x)))[-1]
    ids = [a[0] for a in answers]
    # p(a|q) / sum p(a'|q) is a softmax restricted to the answer logits
    sel = logits[ids]
    e = np.exp(sel - sel.max())
    return e / e.sum()


def multi_token_score(logits_fn: LogitsFn, x: Sequence[int], y: Sequence[int]) -> float:
    """Sum over answer tokens of log P(y_t | y_<t, x)."""
    x, y = list(x), list(y)
    if not y:
        raise ContractError("answer must have at least one token")
    seq = np.asarray(x + y[:-1])
    logits = np.asarray(logits_fn(seq))
    total = 0.0
    for t, tok in enumerate(y):
        total += _log_softmax(logits[len(x) - 1 + t])[tok]
    return float(total)


def choose(logits_fn: LogitsFn, x, candidates) -> int:
    """Index of the highest-scoring candidate answer."""
    return int(np.argmax([multi_token_score(logits_fn, x, c) for c in candidates]))


# ---------------------------------------------------------------- overlap metrics


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: int, cand_total: int, ref_total: int) -> float:
    if overlap == 0 or cand_total == 0 or ref_total == 0:
        return 0.0
    p, r = overlap / cand_total, overlap / ref_total
    return 2 * p * r / (p + r)


def rouge_n(candidate, reference, n: int = 1) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not ref:
        log.warning("empty reference; ROUGE-%d defined as 0", n)
        return 0.0
    c, r = ngrams(cand, n), ngrams(ref, n)
    if not r and cand == ref:
        # too short for any n-gram: identical sequences still score 1
        return 1.0
    overlap = sum((c & r).values())
    return _f1(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not ref:
        log.warning("empty reference; ROUGE-L defined as 0")
        return 0.0
    return _f1(lcs_length(cand, ref), len(cand), len(ref))


def bleu_4(candidate, reference, max_order: int = 4) -> float:
    """Sentence BLEU, uniform weights, brevity penalty, no smoothing.

    Orders longer than either sequence are dropped and the weights are
    spread over the remaining ones, so short identical strings score 1.
    """
    cand, ref = tokenize(candidate), tokenize(reference)
    if not ref:
        log.warning("empty reference; BLEU-4 defined as 0")
        return 0.0
    if not cand:
        return 0.0
    orders = range(1, min(max_order, len(cand), len(ref)) + 1)
    logs = []
    for n in orders:
        c, r = ngrams(cand, n), ngrams(ref, n)
        match = sum((c & r).values())
        if match == 0:
            return 0.0
        logs.append(math.log(match / sum(c.values())))
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(sum(logs) / len(logs))


def token_accuracy(candidate: Sequence, reference: Sequence) -> float:
    if not reference:
        return 0.0
    hits = sum(a == b for a, b in zip(candidate, reference))
    return hits / len(reference)


def accuracy(pred: Sequence, gold: Sequence) -> float:
    if len(pred) != len(gold):
        raise ValueError("prediction and gold lengths differ")
    if not gold:
        return 0.0
    return float(np.mean([p == g for p, g in zip(pred, gold)]))


@dataclass
class MetricReport:
    accuracy: float = 0.0
    rouge_1: float = 0.0
    rouge_2: float = 0.0
    rouge_l: float = 0.0
    bleu_4: float = 0.0
    per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        keys = ("accuracy", "rouge_1", "rouge_2", "rouge_l", "bleu_4")
        out = cls(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})
        out.per_seed = [{k: getattr(r, k) for k in keys} for r in reports]
        return out


def score_pairs(candidates, references) -> MetricReport:
    """Average every metric over aligned (candidate, reference) pairs."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references are not aligned")
    if not references:
        return MetricReport()
    rows = [
        (token_accuracy(c, r), rouge_n(c, r, 1), rouge_n(c, r, 2), rouge_l(c, r), bleu_4(c, r))
        for c, r in zip(candidates, references)
    ]
    a = np.mean(rows, axis=0)
    return MetricReport(*map(float, a))
