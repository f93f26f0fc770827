"""Toy GLM-style causal LM: embedding, N pre-norm blocks, output head.

Activations are laid out (L, B, d) so that stacking clients along the batch
axis never mixes samples: attention, layer norm and the FFN all act within
one batch element.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e30


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    hidden_size: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 32
    prefix_len: int = 0
    prefix_encoder: str = "identity"  # or "mlp"
    prefix_hidden: int = 32
    ffn_mult: int = 4
    embed_std: float = 0.02

    def __post_init__(self):
        if self.n_blocks < 3:
            raise ConfigError(f"n_blocks must be >= 3 for a three-way split, got {self.n_blocks}")
        if self.hidden_size % self.n_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.prefix_len < 0:
            raise ConfigError("prefix_len must be >= 0")
        if self.prefix_encoder not in ("identity", "mlp"):
            raise ConfigError(f"unknown prefix_encoder {self.prefix_encoder!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


class Block:
    """One transformer block; ``params`` maps short names to Tensors."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, params: dict | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = params
            return
        d, f = cfg.hidden_size, cfg.hidden_size * cfg.ffn_mult
        s = 1.0 / math.sqrt(d)
        p = {
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "wq": _normal(rng, (d, d), s), "bq": np.zeros(d),
            "wk": _normal(rng, (d, d), s), "bk": np.zeros(d),
            "wv": _normal(rng, (d, d), s), "bv": np.zeros(d),
            "wo": _normal(rng, (d, d), s / math.sqrt(2 * cfg.n_blocks)), "bo": np.zeros(d),
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "w1": _normal(rng, (d, f), s), "b1": np.zeros(f),
            "w2": _normal(rng, (f, d), 1.0 / math.sqrt(f) / math.sqrt(2 * cfg.n_blocks)), "b2": np.zeros(d),
        }
        if cfg.prefix_len:
            lp, h, dh = cfg.prefix_len, cfg.n_heads, cfg.head_dim
            if cfg.prefix_encoder == "identity":
                p["prefix_key"] = _normal(rng, (lp, h, dh), 0.5)
                p["prefix_value"] = _normal(rng, (lp, h, dh), 0.5)
            else:
                ph = cfg.prefix_hidden
                p["prefix_emb"] = _normal(rng, (lp, d), 1.0)
                p["prefix_w1"] = _normal(rng, (d, ph), s)
                p["prefix_b1"] = np.zeros(ph)
                p["prefix_w2"] = _normal(rng, (ph, 2 * d), 1.0 / math.sqrt(ph))
                p["prefix_b2"] = np.zeros(2 * d)
        self.params = {k: T.parameter(v, name=k) for k, v in p.items()}

    def prefix_kv(self) -> tuple[Tensor, Tensor] | None:
        """Prefix key/value, each (L_p, N_h, d_h), or None when disabled."""
        p = self.params
        cfg = self.cfg
        if "prefix_key" in p:
            return p["prefix_key"], p["prefix_value"]
        if "prefix_emb" in p:
            hid = T.tanh(p["prefix_emb"] @ p["prefix_w1"] + p["prefix_b1"])
            kv = hid @ p["prefix_w2"] + p["prefix_b2"]
            lp, h, dh, d = cfg.prefix_len, cfg.n_heads, cfg.head_dim, cfg.hidden_size
            return kv[:, :d].reshape(lp, h, dh), kv[:, d:].reshape(lp, h, dh)
        return None


def causal_mask(seq_len: int, prefix_len: int = 0) -> np.ndarray:
    """Additive (L, L_p + L) mask: prefix columns always visible, data columns causal."""
    m = np.zeros((seq_len, prefix_len + seq_len))
    m[:, prefix_len:] = np.triu(np.full((seq_len, seq_len), NEG_INF), k=1)
    return m


def block_forward(h: Tensor, block: Block, prefix=None, mask: np.ndarray | None = None,
                  return_attention: bool = False):
    """Pre-norm block with optional prefix keys/values spliced before attention.

    ``prefix`` defaults to the block's own prefix parameters; pass ``False``
    to force vanilla attention.
    """
    cfg = block.cfg
    p = block.params
    L, B, d = h.shape
    H, dh = cfg.n_heads, cfg.head_dim
    if prefix is None:
        prefix = block.prefix_kv()
    elif prefix is False:
        prefix = None

    a = T.layer_norm(h, p["ln1_g"], p["ln1_b"])

    def heads(x):
        return x.reshape(L, B, H, dh).transpose(1, 2, 0, 3)  # (B, H, L, dh)

    q = heads(a @ p["wq"] + p["bq"])
    k = heads(a @ p["wk"] + p["bk"])
    v = heads(a @ p["wv"] + p["bv"])
    lp = 0
    if prefix is not None:
        pk, pv = prefix
        if pk.ndim != 3 or pk.shape[1:] != (H, dh) or pv.shape != pk.shape:
            raise ConfigError(f"prefix shape {pk.shape}/{pv.shape} incompatible with (L_p, {H}, {dh})")
        lp = pk.shape[0]
        pk = T.broadcast_to(pk.transpose(1, 0, 2), (B, H, lp, dh))
        pv = T.broadcast_to(pv.transpose(1, 0, 2), (B, H, lp, dh))
        k = T.concat([pk, k], axis=2)
        v = T.concat([pv, v], axis=2)
    if mask is None:
        mask = causal_mask(L, lp)
    scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
    probs = T.softmax(T.add(scores, mask), axis=-1)
    ctx = (probs @ v).transpose(2, 0, 1, 3).reshape(L, B, d)
    h = h + (ctx @ p["wo"] + p["bo"])
    f = T.layer_norm(h, p["ln2_g"], p["ln2_b"])
    h = h + (T.gelu(f @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"])
    if return_attention:
        return h, probs
    return h


def as_batch(ids) -> tuple[np.ndarray, bool]:
    """Token ids as (L, B) plus whether the input was a single sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[:, None], True
    if ids.ndim != 2:
        raise ValueError(f"token ids must be (L,) or (L, B), got shape {ids.shape}")
    return ids, False


class Embedding:
    def __init__(self, cfg: ModelConfig, rng=None, params=None):
        self.cfg = cfg
        if params is None:
            params = {
                "tok": T.parameter(_normal(rng, (cfg.vocab_size, cfg.hidden_size), cfg.embed_std), name="tok"),
                "pos": T.parameter(_normal(rng, (cfg.max_seq_len, cfg.hidden_size), 0.1 * cfg.embed_std), name="pos"),
            }
        self.params = params

    def __call__(self, ids: np.ndarray) -> Tensor:
        L = ids.shape[0]
        if L == 0:
            raise ValueError("empty token sequence")
        if L > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        tok = T.embedding_lookup(self.params["tok"], ids)  # (L, B, d)
        pos = T.slice_(self.params["pos"], slice(0, L)).reshape(L, 1, self.cfg.hidden_size)
        return tok + pos


class Head:
    """Final layer norm and output projection to vocabulary logits."""

    def __init__(self, cfg: ModelConfig, rng=None, params=None):
        self.cfg = cfg
        if params is None:
            d, v = cfg.hidden_size, cfg.vocab_size
            params = {
                "ln_g": T.parameter(np.ones(d), name="ln_g"),
                "ln_b": T.parameter(np.zeros(d), name="ln_b"),
                "w": T.parameter(_normal(rng, (d, v), 1.0 / math.sqrt(d)), name="w"),
                "b": T.parameter(np.zeros(v), name="b"),
            }
        self.params = params

    def __call__(self, h: Tensor) -> Tensor:
        p = self.params
        return T.layer_norm(h, p["ln_g"], p["ln_b"]) @ p["w"] + p["b"]


class GLMModel:
    """The monolithic reference model."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embedding = Embedding(cfg, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_blocks)]
        self.head = Head(cfg, rng)

    @classmethod
    def from_parts(cls, cfg, embedding, blocks, head) -> "GLMModel":
        m = cls.__new__(cls)
        m.cfg, m.embedding, m.blocks, m.head = cfg, embedding, list(blocks), head
        return m

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embedding.params.items()}
        for i, b in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in b.params.items()})
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out

    def forward(self, ids, taps: list | None = None) -> Tensor:
        """Logits (L, V) for a single sequence or (L, B, V) for a batch.

        ``taps`` collects the hidden state after each block.
        """
        ids, single = as_batch(ids)
        h = self.embedding(ids)
        for blk in self.blocks:
            h = block_forward(h, blk)
            if taps is not None:
                taps.append(h)
        logits = self.head(h)
        if single:
            return logits.reshape(logits.shape[0], logits.shape[2])
        return logits

    __call__ = forward

    def loss(self, ids, targets) -> Tensor:
        logits = self.forward(ids)
        return T.cross_entropy(logits, targets)


def monolithic_forward(model: GLMModel, ids) -> Tensor:
    return model.forward(ids)


def freeze_base_train_prefix(model: GLMModel) -> list[Tensor]:
    """Freeze all base weights; return the prefix parameters to optimise."""
    if model.cfg.prefix_len == 0:
        raise ConfigError("p-tuning needs prefix_len > 0")
    return freeze_base(model.named_parameters())


def freeze_base(params: dict[str, Tensor]) -> list[Tensor]:
    trainable = []
    for name, p in params.items():
        is_prefix = name.rsplit(".", 1)[-1].startswith("prefix_")
        p.requires_grad = is_prefix
        if is_prefix:
            trainable.append(p)
    return trainable


def prefix_param_count(cfg: ModelConfig) -> int:
    n = cfg.n_blocks * 2 * cfg.prefix_len * cfg.n_heads * cfg.head_dim
    if cfg.prefix_encoder == "mlp":
        d, ph, lp = cfg.hidden_size, cfg.prefix_hidden, cfg.prefix_len
        n = cfg.n_blocks * (lp * d + d * ph + ph + ph * 2 * d + 2 * d)
    return n


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"FLGC"
CKPT_VERSION = 1


def save_checkpoint(model: GLMModel, path) -> None:
    """Write config JSON plus named float64 arrays, little-endian, length-prefixed."""
    buf = io.BytesIO()
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    params = model.named_parameters()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode()
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> GLMModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, clen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 10
    cfg = ModelConfig.from_dict(json.loads(raw[off:off + clen]))
    off += clen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    model = GLMModel(cfg, seed=0)
    params = model.named_parameters()
    if set(params) != set(arrays):
        raise ValueError("checkpoint parameter names do not match config")
    for name, p in params.items():
        p.data[...] = arrays[name]
    return model
