"""Three-way partition of a GLMModel into client front, server body and client tail.

Each part runs its own ``Tape``. Boundary tensors are detached at the cut,
so gradients only cross as explicit arrays handed to ``*_backward``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import Block, ConfigError, Embedding, GLMModel, Head, as_batch, block_forward
from .tensor import Tape, Tensor


class StaleRoundError(RuntimeError):
    """No cached activations for this (client_id, round): already consumed or never run."""


class BoundaryShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    front_blocks: tuple[int, ...]
    body_blocks: tuple[int, ...]
    tail_blocks: tuple[int, ...]
    embedding_on_front: bool = True
    head_on_tail: bool = True

    @classmethod
    def standard(cls, n_blocks: int) -> "SplitPlan":
        if n_blocks < 3:
            raise ConfigError(f"a standard split needs >= 3 blocks, got {n_blocks}")
        return cls((0,), tuple(range(1, n_blocks - 1)), (n_blocks - 1,))

    def validate(self, n_blocks: int, allow_empty_front: bool = False) -> None:
        parts = [self.front_blocks, self.body_blocks, self.tail_blocks]
        flat = [i for part in parts for i in part]
        if sorted(flat) != list(range(n_blocks)):
            raise ConfigError(f"plan {self} does not partition blocks 0..{n_blocks - 1}")
        if flat != sorted(flat):
            raise ConfigError("front, body and tail must be contiguous and in order")
        if not self.tail_blocks or (not self.front_blocks and not allow_empty_front):
            raise ConfigError("front and tail must each own at least one block")


def _params_of(prefix: str, blocks: dict[int, Block]) -> dict[str, Tensor]:
    return {f"{prefix}{i}.{k}": v for i, b in blocks.items() for k, v in b.params.items()}


class _RoundCache:
    """Single-use activation caches keyed by (client_id, round)."""

    def __init__(self):
        self._entries: dict[tuple, tuple] = {}
        self._lock = threading.Lock()

    def put(self, key, value):
        with self._lock:
            self._entries[key] = value

    def pop(self, key):
        with self._lock:
            try:
                return self._entries.pop(key)
            except KeyError:
                raise StaleRoundError(f"no cached forward pass for client/round {key}") from None

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def clear(self):
        with self._lock:
            self._entries.clear()


class ClientFront:
    """Embedding plus the leading blocks; produces smashed data h0."""

    def __init__(self, cfg, embedding: Embedding, blocks: dict[int, Block]):
        self.cfg = cfg
        self.embedding = embedding
        self.blocks = blocks
        self._cache = _RoundCache()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embedding.params.items()}
        out.update(_params_of("blocks.", self.blocks))
        return out

    def forward(self, ids, key=(0, 0)) -> np.ndarray:
        """Return h0 as a detached (L, B, d) array; the graph is kept for backward."""
        ids, _ = as_batch(ids)
        if ids.shape[0] == 0:
            raise ValueError("empty token sequence")
        with Tape() as tape:
            h = self.embedding(ids)
            for blk in self.blocks.values():
                h = block_forward(h, blk)
        self._cache.put(key, (tape, h))
        return h.data.copy()

    def backward(self, grad_h0: np.ndarray, key=(0, 0)) -> None:
        tape, h = self._cache.pop(key)
        if h._node is None:
            tape.clear()
            return
        T.backward_from(h, grad_h0)


class ServerBody:
    """The middle blocks. Holds one cache entry per in-flight (client_id, round)."""

    def __init__(self, cfg, blocks: dict[int, Block]):
        self.cfg = cfg
        self.blocks = blocks
        self._cache = _RoundCache()
        self.forward_passes = 0

    def named_parameters(self) -> dict[str, Tensor]:
        return _params_of("blocks.", self.blocks)

    def pending(self) -> int:
        return len(self._cache)

    def forward(self, h0: np.ndarray, key=(0, 0)) -> np.ndarray:
        h0 = np.asarray(h0, dtype=np.float64)
        if h0.ndim != 3 or h0.shape[2] != self.cfg.hidden_size:
            raise BoundaryShapeError(f"smashed data shape {h0.shape} does not match (L, B, {self.cfg.hidden_size})")
        if h0.shape[0] > self.cfg.max_seq_len:
            raise BoundaryShapeError(f"sequence length {h0.shape[0]} exceeds {self.cfg.max_seq_len}")
        with Tape() as tape:
            inp = Tensor(h0, requires_grad=True)
            h = inp
            for blk in self.blocks.values():
                h = block_forward(h, blk)
        self._cache.put(key, (tape, inp, h))
        self.forward_passes += 1
        return h.data.copy()

    def backward(self, grad_h_last: np.ndarray, key=(0, 0)) -> np.ndarray:
        tape, inp, h = self._cache.pop(key)
        grad_h_last = np.asarray(grad_h_last, dtype=np.float64)
        if grad_h_last.shape != h.shape:
            tape.clear()
            raise BoundaryShapeError(f"gradient shape {grad_h_last.shape} != activation shape {h.shape}")
        T.backward_from(h, grad_h_last)
        return inp.grad if inp.grad is not None else np.zeros_like(inp.data)


class ClientTail:
    """The last block(s), final norm and output projection; computes the loss locally."""

    def __init__(self, cfg, blocks: dict[int, Block], head: Head):
        self.cfg = cfg
        self.blocks = blocks
        self.head = head

    def named_parameters(self) -> dict[str, Tensor]:
        out = _params_of("blocks.", self.blocks)
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out

    def logits(self, h_last: np.ndarray) -> Tensor:
        h = Tensor(h_last)
        for blk in self.blocks.values():
            h = block_forward(h, blk)
        return self.head(h)

    def forward_loss(self, h_last: np.ndarray, targets) -> tuple[float, np.ndarray]:
        """Loss and dloss/dh_last; parameter grads land on the tail's tensors."""
        h_last = np.asarray(h_last, dtype=np.float64)
        targets = np.asarray(targets)
        if targets.ndim == 1:
            targets = targets[:, None]
        if targets.shape != h_last.shape[:2]:
            raise BoundaryShapeError(f"targets shape {targets.shape} not aligned with activations {h_last.shape[:2]}")
        with Tape():
            inp = Tensor(h_last, requires_grad=True)
            h = inp
            for blk in self.blocks.values():
                h = block_forward(h, blk)
            loss = T.cross_entropy(self.head(h), targets)
            value = loss.item()
            T.backward(loss)
        grad = inp.grad if inp.grad is not None else np.zeros_like(h_last)
        return value, grad


@dataclass
class SplitModel:
    front: ClientFront
    body: ServerBody
    tail: ClientTail
    plan: SplitPlan = field(default=None)

    def parts(self):
        return self.front, self.body, self.tail


def split(model: GLMModel, plan: SplitPlan | None = None, allow_empty_front: bool = False):
    """Move the model's parameters into (front, body, tail).

    The arrays are shared, not copied; the source model is emptied so the
    parts are the only owners.
    """
    cfg = model.cfg
    plan = plan or SplitPlan.standard(cfg.n_blocks)
    plan.validate(cfg.n_blocks, allow_empty_front=allow_empty_front)
    pick = lambda idx: {i: model.blocks[i] for i in idx}  # noqa: E731
    front = ClientFront(cfg, model.embedding, pick(plan.front_blocks))
    body = ServerBody(cfg, pick(plan.body_blocks))
    tail = ClientTail(cfg, pick(plan.tail_blocks), model.head)
    model.blocks = []
    model.embedding = None
    model.head = None
    return front, body, tail


def reassemble(front: ClientFront, body: ServerBody, tail: ClientTail) -> GLMModel:
    blocks = {**front.blocks, **body.blocks, **tail.blocks}
    order = [blocks[i] for i in sorted(blocks)]
    return GLMModel.from_parts(front.cfg, front.embedding, order, tail.head)


def front_forward(front: ClientFront, ids, key=(0, 0)) -> np.ndarray:
    return front.forward(ids, key)


def body_forward(body: ServerBody, h0, key=(0, 0)) -> np.ndarray:
    return body.forward(h0, key)


def tail_forward_loss(tail: ClientTail, h_last, targets):
    return tail.forward_loss(h_last, targets)


def body_backward(body: ServerBody, grad_h_last, key=(0, 0)) -> np.ndarray:
    return body.backward(grad_h_last, key)


def front_backward(front: ClientFront, grad_h0, key=(0, 0)) -> None:
    front.backward(grad_h0, key)


def split_logits(front, body, tail, ids) -> np.ndarray:
    """Forward-only composition tail(body(front(x))) with no caches left behind."""
    with T.no_grad():
        ids2, single = as_batch(ids)
        h = front.embedding(ids2)
        for blk in front.blocks.values():
            h = block_forward(h, blk)
        for blk in body.blocks.values():
            h = block_forward(h, blk)
        out = tail.logits(h.data).data
    return out[:, 0, :] if single else out


def split_train_step(front, body, tail, ids, targets, key=(0, 0)) -> float:
    """One full forward/backward through the three parts, in-process."""
    h0 = front.forward(ids, key)
    h_last = body.forward(h0, key)
    loss, g_last = tail.forward_loss(h_last, targets)
    g0 = body.backward(g_last, key)
    front.backward(g0, key)
    return loss
