"""Training orchestration: serial, client-batch and server-hierarchical strategies.

Clients and server talk only through ``transport`` messages. Every party
derives the same lockstep schedule from the run config, so no control
messages beyond the protocol are needed. Parties run as threads (default)
or forked processes; in both cases they communicate over real encoded
frames.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import random
import threading
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from . import crypto
from . import transport as tp
from .config import RunConfig
from .crypto import KeyRing, KeyRotationPolicy, NullCipher, SessionCipher
from .data import Sample, cloze_classification, copy_task, partition
from .model import Block, Embedding, GLMModel, Head, freeze_base
from .split import ClientFront, ClientTail, ServerBody, split, split_logits
from .tensor import Adam, IGNORE_INDEX, cross_entropy, no_grad, Tensor

log = logging.getLogger(__name__)

SET_CLIENT = 1
SET_BODY = 2


class RemoteError(RuntimeError):
    def __init__(self, code: int, detail: str):
        super().__init__(f"peer reported protocol error {code}: {detail}")
        self.code = code


class PartyFailure(RuntimeError):
    """One or more parties raised; ``errors`` maps party name to the traceback text."""

    def __init__(self, errors: dict[str, str]):
        super().__init__("party failures:\n" + "\n".join(f"{k}: {v}" for k, v in errors.items()))
        self.errors = errors


class SchemaMismatch(ValueError):
    pass


# ---------------------------------------------------------------- averaging


def fed_average(param_sets: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Element-wise uniform mean of parameter sets with identical schema."""
    if not param_sets:
        raise ValueError("nothing to average")
    names = list(param_sets[0])
    for ps in param_sets[1:]:
        if list(ps) != names:
            raise SchemaMismatch("parameter sets have different names")
        for k in names:
            if np.shape(ps[k]) != np.shape(param_sets[0][k]):
                raise SchemaMismatch(f"shape mismatch for {k}: {np.shape(ps[k])} vs {np.shape(param_sets[0][k])}")
    out = {}
    # base + mean deviation: equals the plain mean, but identical inputs come
    # back bit-exact and averaging an average is a no-op
    for k in names:
        base = np.asarray(param_sets[0][k], dtype=np.float64)
        dev = np.zeros_like(base)
        for ps in param_sets[1:]:
            dev += ps[k] - base
        out[k] = base + dev / len(param_sets)
    return out


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _assign(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    if set(params) != set(values):
        raise SchemaMismatch("parameter names differ from the local set")
    for k, p in params.items():
        p.data[...] = values[k]


# ---------------------------------------------------------------- part cloning


def _clone_block(b: Block) -> Block:
    return Block(b.cfg, params={k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                for k, v in b.params.items()})


def _clone_params(p: dict) -> dict:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in p.items()}


def clone_front(f: ClientFront) -> ClientFront:
    return ClientFront(f.cfg, Embedding(f.cfg, params=_clone_params(f.embedding.params)),
                       {i: _clone_block(b) for i, b in f.blocks.items()})


def clone_body(b: ServerBody) -> ServerBody:
    return ServerBody(b.cfg, {i: _clone_block(x) for i, x in b.blocks.items()})


def clone_tail(t: ClientTail) -> ClientTail:
    return ClientTail(t.cfg, {i: _clone_block(b) for i, b in t.blocks.items()},
                      Head(t.cfg, params=_clone_params(t.head.params)))


def _trainable(params: dict[str, Tensor], mode: str) -> dict[str, Tensor]:
    if mode == "ptuning":
        freeze_base(params)
    return {k: v for k, v in params.items() if v.requires_grad}


def _make_adam(params, cfg: RunConfig) -> Adam:
    o = cfg.optimizer
    return Adam(params, lr=o["lr"], betas=(o["beta1"], o["beta2"]), eps=o["eps"])


# ---------------------------------------------------------------- schedules


def serial_schedule(steps: int, n_clients: int, period: int) -> list[list[tuple[int, int]]]:
    """Periods of (client, n_steps) turns; server steps total ``steps``."""
    quota = [steps // n_clients + (1 if c < steps % n_clients else 0) for c in range(n_clients)]
    done = [0] * n_clients
    periods = []
    while any(d < q for d, q in zip(done, quota)):
        turns = []
        for c in range(n_clients):
            k = min(period, quota[c] - done[c])
            if k > 0:
                turns.append((c, k))
                done[c] += k
        periods.append(turns)
    return periods


def period_chunks(steps: int, period: int) -> list[int]:
    full, rem = divmod(steps, period)
    return [period] * full + ([rem] if rem else [])


# ---------------------------------------------------------------- metrics


@dataclass
class StepRecord:
    step: int
    round: int
    client_id: int
    loss: float
    wall_ms: float


@dataclass
class PartyResult:
    name: str
    records: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    optimizer_steps: int = 0
    forward_passes: int = 0
    skipped: int = 0
    error: str | None = None


# ---------------------------------------------------------------- client


class ClientNode:
    """Owns a front, a tail, its data shard, labels and optimiser."""

    def __init__(self, client_id: int, front: ClientFront, tail: ClientTail, samples: list[Sample],
                 cfg: RunConfig, conn: tp.Connection, rng_seed: int = 0):
        self.client_id = client_id
        self.front = front
        self.tail = tail
        self.samples = samples
        self.cfg = cfg
        self.conn = conn
        self.params = {**{f"front.{k}": v for k, v in front.named_parameters().items()},
                       **{f"tail.{k}": v for k, v in tail.named_parameters().items()}}
        self.trainable = _trainable(self.params, cfg.train_mode)
        self.opt = _make_adam(list(self.trainable.values()), cfg)
        self.wire_dtype = np.dtype(cfg.transport["wire_dtype"])
        self.seal = cfg.crypto["seal"]
        self.policy = KeyRotationPolicy(cfg.crypto["rotation_period"])
        self.keyring: KeyRing | None = None
        self._rng_seed = rng_seed
        self.cipher = NullCipher()
        self.round = 0
        self.cursor = 0
        self.records: list[StepRecord] = []
        self.skipped = 0
        self.t0 = time.perf_counter()

    # -- protocol
    def _recv(self, *types):
        msg = self.conn.recv()
        if isinstance(msg, tp.ProtocolError):
            raise RemoteError(msg.code, msg.detail)
        if not isinstance(msg, types):
            raise tp.ProtocolViolation(f"client {self.client_id} expected {[t.__name__ for t in types]}, "
                                       f"got {type(msg).__name__}")
        return msg

    def handshake(self) -> None:
        if not self.seal:
            return
        if self.keyring is None:
            self.keyring = KeyRing(self.cfg.crypto["rsa_bits"], rng=random.Random(self._rng_seed))
        pub = self.keyring.public
        self.conn.send(tp.Hello(self.client_id, pub.n, pub.e))
        msg = self._recv(tp.KeyAccept)
        self.cipher = SessionCipher(self.keyring.unwrap(msg.wrapped_session_key), role=0, epoch=self.keyring.epoch)

    def maybe_rotate(self) -> bool:
        if self.seal and crypto.rotate(self.policy, self.round, self.keyring) is not None:
            self.handshake()
            return True
        return False

    def next_sample(self) -> Sample:
        s = self.samples[self.cursor % len(self.samples)]
        self.cursor += 1
        return s

    def train_step(self, sample: Sample | None = None) -> float | None:
        """One split step against the server; None if the server dropped the round."""
        self.maybe_rotate()
        sample = sample or self.next_sample()
        key = (self.client_id, self.round)
        rnd = self.round
        self.round += 1
        h0 = self.front.forward(sample.ids, key)
        self.conn.send(tp.seal_tensor(tp.SmashedData, self.cipher, h0, rnd, self.wire_dtype, self.client_id))
        try:
            act = self._recv(tp.ActivationReturn)
        except RemoteError as exc:
            if exc.code != tp.ERR_STALE_ROUND:
                raise
            self.front._cache.pop(key)
            self.skipped += 1
            log.warning("client %d: round %d dropped by server", self.client_id, rnd)
            return None
        h_last = tp.open_tensor(act, self.cipher)
        loss, g_last = self.tail.forward_loss(h_last, sample.targets)
        self.conn.send(tp.seal_tensor(tp.GradientUpload, self.cipher, g_last, rnd, self.wire_dtype))
        ret = self._recv(tp.GradientReturn)
        self.front.backward(tp.open_tensor(ret, self.cipher), key)
        self.opt.step()
        self.opt.zero_grad()
        self.records.append(StepRecord(len(self.records), rnd, self.client_id, loss,
                                       (time.perf_counter() - self.t0) * 1e3))
        return loss

    def sync(self) -> None:
        """Upload trainable client-part parameters and adopt the returned average."""
        blob = tp.encode_params(_snapshot(self.trainable))
        self.conn.send(tp.ParamSync(SET_CLIENT, self.cipher.seal(blob)))
        msg = self._recv(tp.ParamSync)
        _assign(self.trainable, tp.decode_params(self.cipher.open(msg.sealed_blob)))

    def wait_turn(self) -> None:
        self._recv(tp.Ack)

    def result(self) -> PartyResult:
        return PartyResult(f"client{self.client_id}", self.records, _snapshot(self.params), self.opt.t,
                           skipped=self.skipped)


def client_program(node: ClientNode, strategy: str, steps: int, n_clients: int, period: int) -> PartyResult:
    node.t0 = time.perf_counter()
    node.handshake()
    if strategy == "serial":
        for turns in serial_schedule(steps, n_clients, period):
            mine = dict(turns).get(node.client_id, 0)
            if mine:
                node.wait_turn()
                for _ in range(mine):
                    node.train_step()
            node.sync()
    else:
        for chunk in period_chunks(steps, period):
            for _ in range(chunk):
                node.train_step()
            node.sync()
    node.conn.close()
    return node.result()


# ---------------------------------------------------------------- server


@dataclass
class Peer:
    conn: tp.Connection
    index: int
    client_id: int | None = None
    cipher: object = field(default_factory=NullCipher)
    alive: bool = True
    expected_round: int = 0


class ServerNode:
    """Serves one ServerBody to one or more client connections."""

    def __init__(self, body: ServerBody, cfg: RunConfig, conns: list[tp.Connection]):
        self.body = body
        self.cfg = cfg
        self.peers = [Peer(c, i) for i, c in enumerate(conns)]
        self.params = {f"body.{k}": v for k, v in body.named_parameters().items()}
        self.trainable = _trainable(self.params, cfg.train_mode)
        self.opt = _make_adam(list(self.trainable.values()), cfg)
        self.wire_dtype = np.dtype(cfg.transport["wire_dtype"])
        self.seal = cfg.crypto["seal"]
        self.timeout = cfg.transport.get("straggler_timeout")
        self.grad_scale = 1.0

    def _rekey(self, peer: Peer, hello: tp.Hello) -> None:
        key = SessionCipher.fresh_key()
        wrapped = crypto.wrap_session_key(crypto.RsaPublicKey(hello.n, hello.e), key)
        peer.client_id = hello.client_id
        epoch = getattr(peer.cipher, "epoch", -1) + 1
        peer.conn.send(tp.KeyAccept(wrapped))
        peer.cipher = SessionCipher(key, role=1, epoch=epoch)

    def recv(self, peer: Peer, *types, timeout: float | None = None):
        """Receive the next expected message, servicing re-keys on the way."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            left = None if deadline is None else max(1e-3, deadline - time.monotonic())
            msg = peer.conn.recv(left)
            if isinstance(msg, tp.Hello):
                self._rekey(peer, msg)
                continue
            if isinstance(msg, tp.ProtocolError):
                raise RemoteError(msg.code, msg.detail)
            if isinstance(msg, (tp.SmashedData,)) and msg.round < peer.expected_round:
                peer.conn.send(tp.ProtocolError(tp.ERR_STALE_ROUND, f"round {msg.round} already closed"))
                continue
            if not isinstance(msg, types):
                peer.conn.send(tp.ProtocolError(tp.ERR_UNEXPECTED, type(msg).__name__))
                raise tp.ProtocolViolation(f"expected {[t.__name__ for t in types]}, got {type(msg).__name__}")
            return msg

    def handshake_all(self) -> None:
        if not self.seal:
            return
        for p in self.peers:
            if p.client_id is None:  # peers keyed up front (tcp server role) are skipped
                self._rekey(p, self.recv_hello(p))

    def recv_hello(self, peer: Peer) -> tp.Hello:
        msg = peer.conn.recv()
        if not isinstance(msg, tp.Hello):
            raise tp.ProtocolViolation(f"expected Hello, got {type(msg).__name__}")
        return msg

    def _apply_update(self) -> None:
        self.opt.step(self.grad_scale)
        self.opt.zero_grad()

    def serve_step(self, peer: Peer) -> None:
        """Serve one single-client round: forward, then backward."""
        sm = self.recv(peer, tp.SmashedData)
        key = (peer.index, sm.round)
        try:
            h_last = self.body.forward(tp.open_tensor(sm, peer.cipher), key)
        except ValueError as exc:
            peer.conn.send(tp.ProtocolError(tp.ERR_SHAPE, str(exc)))
            raise
        peer.conn.send(tp.seal_tensor(tp.ActivationReturn, peer.cipher, h_last, sm.round, self.wire_dtype))
        gu = self.recv(peer, tp.GradientUpload)
        if gu.round != sm.round:
            peer.conn.send(tp.ProtocolError(tp.ERR_STALE_ROUND, f"gradient for round {gu.round}, expected {sm.round}"))
            raise tp.ProtocolViolation("gradient round mismatch")
        g0 = self.body.backward(tp.open_tensor(gu, peer.cipher), key)
        peer.conn.send(tp.seal_tensor(tp.GradientReturn, peer.cipher, g0, sm.round, self.wire_dtype))
        peer.expected_round = sm.round + 1
        self._apply_update()

    def serve_batch_round(self, rnd: int) -> list[int]:
        """Stack every live client's smashed data, one body pass, scatter results.

        Returns the indices of the clients that took part.
        """
        got = []
        for p in self.peers:
            if not p.alive:
                continue
            try:
                sm = self.recv(p, tp.SmashedData, timeout=self.timeout)
            except TimeoutError:
                log.warning("client %s missed round %d", p.client_id, rnd)
                continue
            except tp.ConnectionClosed:
                p.alive = False
                log.warning("client %s disconnected", p.client_id)
                continue
            got.append((p, sm, tp.open_tensor(sm, p.cipher)))
        for p in self.peers:
            p.expected_round = rnd + 1
        if not got:
            return []
        lens = [h.shape[0] for _, _, h in got]
        L = max(lens)
        stacked = np.zeros((L, sum(h.shape[1] for _, _, h in got), self.body.cfg.hidden_size))
        cols = []
        c = 0
        for _, _, h in got:
            stacked[: h.shape[0], c:c + h.shape[1]] = h
            cols.append((c, c + h.shape[1]))
            c += h.shape[1]
        key = (-1, rnd)
        h_last = self.body.forward(stacked, key)
        for (p, sm, h), (a, b) in zip(got, cols):
            p.conn.send(tp.seal_tensor(tp.ActivationReturn, p.cipher, h_last[: h.shape[0], a:b], sm.round,
                                       self.wire_dtype))
        grad = np.zeros_like(h_last)
        for (p, sm, h), (a, b) in zip(got, cols):
            gu = self.recv(p, tp.GradientUpload)
            grad[: h.shape[0], a:b] = tp.open_tensor(gu, p.cipher)
        g0 = self.body.backward(grad, key)
        for (p, sm, h), (a, b) in zip(got, cols):
            p.conn.send(tp.seal_tensor(tp.GradientReturn, p.cipher, g0[: h.shape[0], a:b], sm.round,
                                       self.wire_dtype))
        self._apply_update()
        return [p.index for p, _, _ in got]

    def collect_client_params(self, peer: Peer) -> dict[str, np.ndarray]:
        msg = self.recv(peer, tp.ParamSync)
        return tp.decode_params(peer.cipher.open(msg.sealed_blob))

    def send_client_params(self, peer: Peer, params: dict[str, np.ndarray]) -> None:
        peer.conn.send(tp.ParamSync(SET_CLIENT, peer.cipher.seal(tp.encode_params(params))))

    def aggregate_clients(self) -> None:
        sets, live = [], []
        for p in self.peers:
            if not p.alive:
                continue
            try:
                sets.append(self.collect_client_params(p))
                live.append(p)
            except tp.ConnectionClosed:
                p.alive = False
                log.warning("client %s dropped before averaging", p.client_id)
        if not sets:
            return
        avg = fed_average(sets)
        for p in live:
            self.send_client_params(p, avg)

    def result(self, name="server") -> PartyResult:
        return PartyResult(name, params=_snapshot(self.params), optimizer_steps=self.opt.t,
                           forward_passes=self.body.forward_passes)


def server_serial(node: ServerNode, steps: int, period: int) -> PartyResult:
    node.handshake_all()
    for turns in serial_schedule(steps, len(node.peers), period):
        for c, k in turns:
            p = node.peers[c]
            if not p.alive:
                continue
            try:
                p.conn.send(tp.Ack(p.expected_round))
                for _ in range(k):
                    node.serve_step(p)
            except tp.ConnectionClosed:
                p.alive = False
                log.warning("client %s dropped; skipped for the rest of the run", p.client_id)
        node.aggregate_clients()
    return node.result()


def server_client_batch(node: ServerNode, steps: int, period: int) -> PartyResult:
    node.handshake_all()
    if node.cfg.client_batch_reduce == "mean":
        node.grad_scale = 1.0 / len(node.peers)
    rnd = 0
    for chunk in period_chunks(steps, period):
        for _ in range(chunk):
            node.serve_batch_round(rnd)
            rnd += 1
        node.aggregate_clients()
    return node.result()


def replica_program(node: ServerNode, coord: tp.Connection, steps: int, period: int, name: str) -> PartyResult:
    """One server replica paired with one client; averages through the coordinator."""
    node.handshake_all()
    peer = node.peers[0]
    for chunk in period_chunks(steps, period):
        for _ in range(chunk):
            node.serve_step(peer)
        client_params = node.collect_client_params(peer)
        coord.send(tp.ParamSync(SET_BODY, tp.encode_params(_snapshot(node.trainable))))
        coord.send(tp.ParamSync(SET_CLIENT, tp.encode_params(client_params)))
        body_avg = tp.decode_params(_expect(coord, tp.ParamSync).sealed_blob)
        client_avg = tp.decode_params(_expect(coord, tp.ParamSync).sealed_blob)
        if node.cfg.averaging.get("average_server_replicas", True):
            _assign(node.trainable, body_avg)
        node.send_client_params(peer, client_avg)
    coord.close()
    return node.result(name)


def _expect(conn, cls):
    msg = conn.recv()
    if isinstance(msg, tp.ProtocolError):
        raise RemoteError(msg.code, msg.detail)
    if not isinstance(msg, cls):
        raise tp.ProtocolViolation(f"expected {cls.__name__}, got {type(msg).__name__}")
    return msg


def coordinator_program(conns: list[tp.Connection], n_syncs: int) -> None:
    """Stop-the-world averaging of replica bodies and client parts."""
    live = list(range(len(conns)))
    for _ in range(n_syncs):
        bodies, clients, ok = [], [], []
        for i in live:
            try:
                b = tp.decode_params(_expect(conns[i], tp.ParamSync).sealed_blob)
                c = tp.decode_params(_expect(conns[i], tp.ParamSync).sealed_blob)
            except tp.ConnectionClosed:
                log.warning("replica %d failed; excluded from averaging", i)
                continue
            bodies.append(b)
            clients.append(c)
            ok.append(i)
        live = ok
        if not live:
            return
        b_avg, c_avg = fed_average(bodies), fed_average(clients)
        for i in live:
            conns[i].send(tp.ParamSync(SET_BODY, tp.encode_params(b_avg)))
            conns[i].send(tp.ParamSync(SET_CLIENT, tp.encode_params(c_avg)))


# ---------------------------------------------------------------- executors


def _run_party(fn, args, results, name):
    try:
        res = fn(*args)
    except BaseException as exc:  # reported to the orchestrator, never swallowed
        res = PartyResult(name, error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
    results.put((name, res))


class _Launcher:
    def __init__(self, executor: str):
        self.executor = executor
        if executor == "process":
            self.ctx = mp.get_context("fork")
            self.results = self.ctx.Queue()
        else:
            import queue

            self.results = queue.Queue()
        self.handles = []

    def start(self, name, fn, *args):
        target = (self.ctx.Process if self.executor == "process" else threading.Thread)
        h = target(target=_run_party, args=(fn, args, self.results, name), daemon=True)
        h.start()
        self.handles.append(h)

    def collect(self, n: int, timeout: float | None = None) -> dict[str, PartyResult]:
        out = {}
        for _ in range(n):
            name, res = self.results.get(timeout=timeout)
            out[name] = res
        for h in self.handles:
            h.join(timeout=5)
        return out


def _pair(cfg: RunConfig):
    mode = cfg.transport["mode"]
    if mode == "loopback" and cfg.executor == "thread":
        return tp.loopback_pair()
    if mode == "tcp":
        return tp.tcp_pair()
    return tp.socket_pair()


# ---------------------------------------------------------------- runs


@dataclass
class RunResult:
    strategy: str
    n_clients: int
    records: list
    wall_s: float
    init_eval_loss: float
    final_eval_loss: float
    server_forward_passes: int
    server_optimizer_steps: int
    clients: list = field(default_factory=list)
    bodies: list = field(default_factory=list)
    skipped: int = 0

    @property
    def loss_ratio(self) -> float:
        return self.final_eval_loss / self.init_eval_loss


def build_task(cfg: RunConfig):
    t = cfg.task
    mc = cfg.model_config
    if t["name"] == "copy":
        train = copy_task(t["n_train"], seed=cfg.seed + 1, vocab_size=mc.vocab_size)
        evals = copy_task(t["n_eval"], seed=cfg.seed + 10_007, vocab_size=mc.vocab_size)
    else:
        train = cloze_classification(t["n_train"], seed=cfg.seed + 1, vocab_size=mc.vocab_size)
        evals = cloze_classification(t["n_eval"], seed=cfg.seed + 10_007, vocab_size=mc.vocab_size)
    return train, evals


def eval_loss(front, body, tail, samples) -> float:
    losses = []
    with no_grad():
        for s in samples:
            logits = split_logits(front, body, tail, s.ids)
            losses.append(cross_entropy(Tensor(logits), s.targets).item())
    return float(np.mean(losses))


def shard_data(cfg: RunConfig, train: list[Sample]) -> list[list[Sample]]:
    labels = [s.label if s.label is not None else 0 for s in train]
    part = partition(labels, cfg.partition["mode"], cfg.n_clients, seed=cfg.seed,
                     fractions=cfg.partition.get("fractions"))
    part.check(len(train))
    rng = np.random.default_rng(cfg.seed + 77)
    shards = []
    for c in range(cfg.n_clients):
        s = part.shard(train, c)
        order = rng.permutation(len(s))
        shards.append([s[i] for i in order])
    return shards


def run(cfg: RunConfig, shards: list[list[Sample]] | None = None, evals: list[Sample] | None = None,
        live: list | None = None) -> RunResult:
    """Run one experiment end-to-end in this host, parties connected by transport.

    ``live``, if given, receives the ClientNode objects as they are built so a
    caller can read partial records after an interrupt (thread executor only).
    """
    cfg.validate()
    mc = cfg.model_config
    base = GLMModel(mc, seed=cfg.seed)
    front0, body0, tail0 = split(base)
    if shards is None or evals is None:
        train, ev = build_task(cfg)
        shards = shards or shard_data(cfg, train)
        evals = evals or ev
    M = cfg.n_clients
    steps = cfg.steps
    period = cfg.averaging["period_steps"]
    seeds = np.random.SeedSequence(cfg.seed).generate_state(M)
    init = eval_loss(front0, body0, tail0, evals)

    fronts = [clone_front(front0) for _ in range(M)]
    tails = [clone_tail(tail0) for _ in range(M)]
    launcher = _Launcher(cfg.executor)
    t0 = time.perf_counter()

    if cfg.strategy in ("serial", "client_batch"):
        server_ends, client_ends = [], []
        for _ in range(M):
            s, c = _pair(cfg)
            server_ends.append(s)
            client_ends.append(c)
        nodes = [ClientNode(i, fronts[i], tails[i], shards[i], cfg, client_ends[i], int(seeds[i])) for i in range(M)]
        if live is not None:
            live.extend(nodes)
        server = ServerNode(body0, cfg, server_ends)
        for i, node in enumerate(nodes):
            launcher.start(f"client{i}", client_program, node, cfg.strategy, steps, M, period)
        if cfg.strategy == "serial":
            sres = server_serial(server, steps, period)
        else:
            sres = server_client_batch(server, steps, period)
        results = launcher.collect(M)
        bodies_res = [sres]
        body_parts = [body0]
    elif cfg.strategy == "hierarchical":
        bodies = [clone_body(body0) for _ in range(M)]
        coord_ends = []
        nodes = []
        for i in range(M):
            s, c = _pair(cfg)
            cs, cc = _pair(cfg)
            coord_ends.append(cs)
            nodes.append(ClientNode(i, fronts[i], tails[i], shards[i], cfg, c, int(seeds[i])))
            if live is not None:
                live.append(nodes[-1])
            replica = ServerNode(bodies[i], cfg, [s])
            launcher.start(f"replica{i}", replica_program, replica, cc, steps, period, f"replica{i}")
            launcher.start(f"client{i}", client_program, nodes[i], "hierarchical", steps, M, period)
        coordinator_program(coord_ends, len(period_chunks(steps, period)))
        results = launcher.collect(2 * M)
        bodies_res = [results[f"replica{i}"] for i in range(M)]
        body_parts = bodies
    else:
        raise ValueError(f"unknown strategy {cfg.strategy!r}")
    wall = time.perf_counter() - t0

    errors = {k: r.error for k, r in results.items() if r.error}
    if errors:
        raise PartyFailure(errors)
    client_res = [results[f"client{i}"] for i in range(M)]

    # Process executors mutate copies; bring final parameters home.
    for i in range(M):
        _assign(nodes[i].params, client_res[i].params)
    for part, res in zip(body_parts, bodies_res):
        own = {f"body.{k}": v for k, v in part.named_parameters().items()}
        _assign(own, res.params)

    final = eval_loss(fronts[0], body_parts[0], tails[0], evals)
    records = sorted((r for cr in client_res for r in cr.records), key=lambda r: (r.round, r.client_id))
    return RunResult(
        strategy=cfg.strategy, n_clients=M, records=records, wall_s=wall, init_eval_loss=init,
        final_eval_loss=final,
        server_forward_passes=sum(b.forward_passes for b in bodies_res),
        server_optimizer_steps=sum(b.optimizer_steps for b in bodies_res),
        clients=[(fronts[i], tails[i]) for i in range(M)], bodies=body_parts,
        skipped=sum(c.skipped for c in client_res),
    )


def run_serial(cfg: RunConfig, **kw) -> RunResult:
    return run(cfg.with_overrides(strategy="serial"), **kw)


def run_client_batch(cfg: RunConfig, **kw) -> RunResult:
    return run(cfg.with_overrides(strategy="client_batch"), **kw)


def run_hierarchical(cfg: RunConfig, **kw) -> RunResult:
    return run(cfg.with_overrides(strategy="hierarchical"), **kw)


def centralized_split_training(cfg: RunConfig, samples: list[Sample]) -> tuple[GLMModel, list[float]]:
    """Reference trajectory: one client, no protocol, wire rounding applied in place.

    Used as the oracle for serial training with a single client.
    """
    mc = cfg.model_config
    front, body, tail = split(GLMModel(mc, seed=cfg.seed))
    cparams = {**{f"front.{k}": v for k, v in front.named_parameters().items()},
               **{f"tail.{k}": v for k, v in tail.named_parameters().items()}}
    copt = _make_adam(list(_trainable(cparams, cfg.train_mode).values()), cfg)
    sparams = {f"body.{k}": v for k, v in body.named_parameters().items()}
    sopt = _make_adam(list(_trainable(sparams, cfg.train_mode).values()), cfg)
    wd = np.dtype(cfg.transport["wire_dtype"])
    losses = []
    for i in range(cfg.steps):
        s = samples[i % len(samples)]
        h0 = tp.quantize(front.forward(s.ids, (0, i)), wd)
        h_last = tp.quantize(body.forward(h0, (0, i)), wd)
        loss, g = tail.forward_loss(h_last, s.targets)
        g0 = tp.quantize(body.backward(tp.quantize(g, wd), (0, i)), wd)
        front.backward(g0, (0, i))
        sopt.step()
        sopt.zero_grad()
        copt.step()
        copt.zero_grad()
        losses.append(loss)
    from .split import reassemble

    return reassemble(front, body, tail), losses
