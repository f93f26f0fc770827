"""Inversion attack on smashed data, in the spirit of feature-space hijacking.

A malicious server colludes with one client, takes that client's private
sentences as a shadow set, and trains an inverse model that maps smashed
data back to tokens. It then decodes smashed data hijacked from a victim
client. The harness compares a front that is only the embedding layer
against a front that also owns the first transformer block.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from . import transport as tp
from .data import zipf_corpus
from .metrics import MetricReport, score_pairs
from .model import Block, GLMModel, ModelConfig, block_forward
from .split import ClientFront, SplitPlan, split
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

EMBEDDING_ONLY = "embedding_only"
FRONT_BLOCK = "front_block"
LINEAR = "linear"
BLOCK_DECODER = "block"

DEFAULT_ARCH = {EMBEDDING_ONLY: LINEAR, FRONT_BLOCK: BLOCK_DECODER}


class AttackFailed(RuntimeError):
    pass


@dataclass
class AttackConfig:
    split_variant: str = EMBEDDING_ONLY
    inverse_arch: str | None = None      # defaults to the pairing in DEFAULT_ARCH
    decoder_blocks: int = 1
    n_shadow: int = 400
    n_victim: int = 100
    seq_len: int = 16
    epochs: int = 12
    lr: float = 1e-2
    seed: int = 0
    model: dict = field(default_factory=lambda: ModelConfig().to_dict())

    @property
    def arch(self) -> str:
        return self.inverse_arch or DEFAULT_ARCH[self.split_variant]


def build_front(variant: str, model: GLMModel) -> ClientFront:
    """Client front for the chosen split variant; the rest of the model is discarded."""
    n = model.cfg.n_blocks
    if variant == EMBEDDING_ONLY:
        plan = SplitPlan((), tuple(range(0, n - 1)), (n - 1,))
    elif variant == FRONT_BLOCK:
        plan = SplitPlan.standard(n)
    else:
        raise ValueError(f"unknown split variant {variant!r}")
    front, _, _ = split(model, plan, allow_empty_front=True)
    for p in front.named_parameters().values():
        p.requires_grad = False
    return front


def smash(front: ClientFront, sentences: list[np.ndarray]) -> list[np.ndarray]:
    """Smashed data as the server would see it: float32 on the wire."""
    out = []
    with no_grad():
        for s in sentences:
            h = front.forward(s)
            front._cache.clear()
            out.append(tp.quantize(h)[:, 0, :])
    return out


class InverseModel:
    """Maps (L, d) smashed data to (L, V) token logits."""

    def __init__(self, arch: str, cfg: ModelConfig, rng: np.random.Generator, n_blocks: int = 1):
        d, v = cfg.hidden_size, cfg.vocab_size
        self.arch = arch
        self.cfg = cfg
        self.blocks = [Block(cfg, rng) for _ in range(n_blocks)] if arch == BLOCK_DECODER else []
        if arch not in (LINEAR, BLOCK_DECODER):
            raise ValueError(f"unknown inverse architecture {arch!r}")
        self.ln_g = T.parameter(np.ones(d))
        self.ln_b = T.parameter(np.zeros(d))
        self.w = T.parameter(rng.normal(0, 1 / math.sqrt(d), (d, v)))
        self.b = T.parameter(np.zeros(v))

    def parameters(self):
        ps = [self.w, self.b]
        if self.blocks:
            ps += [self.ln_g, self.ln_b]
            for b in self.blocks:
                ps += list(b.params.values())
        return ps

    def __call__(self, h: np.ndarray) -> Tensor:
        x = Tensor(h[:, None, :] if h.ndim == 2 else h)
        if self.blocks:
            L = x.shape[0]
            full = np.zeros((L, L))  # the attacker may look both ways
            for b in self.blocks:
                x = block_forward(x, b, prefix=False, mask=full)
            x = T.layer_norm(x, self.ln_g, self.ln_b)
        logits = x @ self.w + self.b
        return logits.reshape(logits.shape[0], logits.shape[2])


def train_inverse(front: ClientFront, shadow: list[np.ndarray], arch: str, epochs: int = 12, lr: float = 1e-2,
                  seed: int = 0, decoder_blocks: int = 1):
    """Fit F^-1 on the colluder's shadow set; the front itself stays frozen."""
    rng = np.random.default_rng(seed)
    inv = InverseModel(arch, front.cfg, rng, decoder_blocks)
    feats = smash(front, shadow)
    opt = T.Adam(inv.parameters(), lr=lr)
    curve = []
    for ep in range(epochs):
        order = rng.permutation(len(shadow))
        tot = 0.0
        for i in order:
            loss = T.cross_entropy(inv(feats[i]), shadow[i])
            loss.backward()
            opt.step()
            opt.zero_grad()
            tot += loss.item()
        curve.append(tot / max(len(shadow), 1))
        if not np.isfinite(curve[-1]):
            raise AttackFailed(f"inverse training diverged at epoch {ep}")
        log.info("inverse %s epoch %d loss %.4f", arch, ep, curve[-1])
    return inv, curve


@dataclass
class Reconstruction:
    tokens: np.ndarray
    confidence: np.ndarray


def attack(inv: InverseModel, captured: list[np.ndarray]) -> list[Reconstruction]:
    """Greedy per-position decode of hijacked smashed data."""
    out = []
    with no_grad():
        for h in captured:
            h = np.asarray(h)
            if h.ndim == 3:
                h = h[:, 0, :]
            if h.shape[-1] != inv.cfg.hidden_size:
                raise ValueError(f"captured width {h.shape[-1]} != decoder width {inv.cfg.hidden_size}")
            logits = inv(h).data
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            out.append(Reconstruction(p.argmax(axis=1), p.max(axis=1)))
    return out


def evaluate_attack(recs: list[Reconstruction], truth: list[np.ndarray]) -> MetricReport:
    cands = [[str(t) for t in r.tokens] for r in recs]
    refs = [[str(t) for t in s] for s in truth]
    return score_pairs(cands, refs)


def load_capture(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        return tp.decode_tensor_records(fh.read())


def save_capture(path, tensors) -> None:
    with open(path, "wb") as fh:
        for t in tensors:
            fh.write(tp.encode_tensor_record(np.asarray(t)))


def run_variant(cfg: AttackConfig) -> tuple[MetricReport, list[float]]:
    mc = ModelConfig.from_dict(cfg.model)
    model = GLMModel(mc, seed=cfg.seed)
    front = build_front(cfg.split_variant, model)
    shadow = zipf_corpus(cfg.n_shadow, seed=10 * cfg.seed + 1, length=cfg.seq_len, vocab_size=mc.vocab_size)
    victim = zipf_corpus(cfg.n_victim, seed=10 * cfg.seed + 2, length=cfg.seq_len, vocab_size=mc.vocab_size)
    inv, curve = train_inverse(front, shadow, cfg.arch, cfg.epochs, cfg.lr, cfg.seed, cfg.decoder_blocks)
    recs = attack(inv, smash(front, victim))
    return evaluate_attack(recs, victim), curve


def differential(seeds=(0, 1, 2), **kw) -> dict:
    """Run both split variants per seed and report the security differential."""
    rows = []
    for s in seeds:
        emb, _ = run_variant(AttackConfig(split_variant=EMBEDDING_ONLY, seed=s, **kw))
        blk, _ = run_variant(AttackConfig(split_variant=FRONT_BLOCK, seed=s, **kw))
        rows.append({"seed": s, EMBEDDING_ONLY: emb.to_dict(), FRONT_BLOCK: blk.to_dict()})
    summary = {}
    for v in (EMBEDDING_ONLY, FRONT_BLOCK):
        summary[v] = MetricReport.mean([MetricReport(**{k: r[v][k] for k in
                                                        ("accuracy", "rouge_1", "rouge_2", "rouge_l", "bleu_4")})
                                        for r in rows]).to_dict()
    return {"per_seed": rows, "mean": summary}


def report_json(result: dict) -> str:
    return json.dumps(result, indent=2, default=lambda o: asdict(o) if hasattr(o, "__dataclass_fields__") else str(o))
