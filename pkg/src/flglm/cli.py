"""Command line entry point: train, bench, attack, keygen, eval.

Exit codes: 0 ok, 2 config error, 3 protocol error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attack as atk
from . import bench as bn
from . import crypto
from . import transport as tp
from .config import ConfigValidationError, RunConfig, parse_override
from .data import Sample, cloze_classification, copy_task, LABEL_TOKENS
from .metrics import choose, model_logits_fn, score_pairs
from .model import ConfigError, GLMModel, load_checkpoint, save_checkpoint
from .orchestrator import (ClientNode, PartyFailure, RemoteError, ServerNode, build_task, clone_front,
                           clone_tail, run, server_client_batch, server_serial, shard_data, client_program)
from .split import reassemble, split

log = logging.getLogger("flglm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3

PROTOCOL_ERRORS = (tp.FramingError, tp.ProtocolViolation, ConnectionError, RemoteError,
                   crypto.AuthenticationError)
METRIC_COLUMNS = ("step", "round", "client_id", "loss", "wall_ms")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def _hostport(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise UsageError(f"expected host:port, got {text!r}")
    return host or default_host, int(port)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over: dict = {}
    for item in getattr(args, "set", None) or []:
        over = _deep_merge(over, parse_override(item))
    for flag, key in (("strategy", "strategy"), ("clients", "n_clients"), ("steps", "steps"),
                      ("seed", "seed"), ("executor", "executor")):
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = val
    if getattr(args, "transport", None):
        mode = "loopback" if args.transport == "loopback" else "tcp"
        over.setdefault("transport", {})["mode"] = mode
    return cfg.with_overrides(**over) if over else cfg


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def write_metrics(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r.step, r.round, r.client_id, f"{r.loss:.10g}", f"{r.wall_ms:.3f}"])


def write_summary(path: Path, cfg: RunConfig, **extra) -> None:
    body = {"config": cfg.to_dict(), **extra}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str))


def _is_protocol_failure(exc: PartyFailure) -> bool:
    names = {c.__name__ for c in PROTOCOL_ERRORS} | {"ConnectionClosed", "ConnectionResetError", "BrokenPipeError"}
    return any(text.split(":", 1)[0] in names for text in exc.errors.values())


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.role == "server":
        return _train_server(cfg, args, out)
    if args.role == "client":
        return _train_client(cfg, args, out)

    live: list = []
    t0 = time.perf_counter()
    try:
        res = run(cfg, live=live)
    except KeyboardInterrupt:
        recs = sorted((r for n in live for r in n.records), key=lambda r: (r.round, r.client_id))
        write_metrics(out / "metrics.csv", recs)
        write_summary(out / "summary.json", cfg, status="interrupted", steps_done=len(recs),
                      wall_s=time.perf_counter() - t0)
        print(f"interrupted; {len(recs)} partial records written to {out}", file=sys.stderr)
        return 130
    write_metrics(out / "metrics.csv", res.records)
    model = reassemble(res.clients[0][0], res.bodies[0], res.clients[0][1])
    save_checkpoint(model, out / "model.ckpt")
    write_summary(out / "summary.json", cfg, status="ok", wall_s=res.wall_s,
                  init_eval_loss=res.init_eval_loss, final_eval_loss=res.final_eval_loss,
                  loss_ratio=res.loss_ratio, server_forward_passes=res.server_forward_passes,
                  server_optimizer_steps=res.server_optimizer_steps, skipped_rounds=res.skipped)
    print(f"{cfg.strategy}: eval loss {res.init_eval_loss:.4f} -> {res.final_eval_loss:.4f} "
          f"({res.wall_s:.1f}s), outputs in {out}")
    return EXIT_OK


def _train_server(cfg: RunConfig, args, out: Path) -> int:
    if cfg.strategy == "hierarchical":
        raise UsageError("the standalone server role runs serial or client_batch; hierarchical is local only")
    host, port = _hostport(args.bind or f"{tp.bind_address()}:{tp.DEFAULT_PORT}")
    _, body, _ = split(GLMModel(cfg.model_config, seed=cfg.seed))
    srv = tp.listen(host, port)
    log.info("listening on %s:%d for %d clients", host, port, cfg.n_clients)
    conns = [tp.accept(srv) for _ in range(cfg.n_clients)]
    srv.close()
    if cfg.crypto["seal"]:
        # order peers by client id so the serial schedule matches on both sides
        hellos = []
        for c in conns:
            msg = c.recv()
            if not isinstance(msg, tp.Hello):
                raise tp.ProtocolViolation(f"expected Hello, got {type(msg).__name__}")
            hellos.append(msg)
        order = sorted(range(len(conns)), key=lambda i: hellos[i].client_id)
        node = ServerNode(body, cfg, [conns[i] for i in order])
        for peer, i in zip(node.peers, order):
            node._rekey(peer, hellos[i])
    else:
        node = ServerNode(body, cfg, conns)
    t0 = time.perf_counter()
    try:
        fn = server_serial if cfg.strategy == "serial" else server_client_batch
        res = fn(node, cfg.steps, cfg.averaging["period_steps"])
    except KeyboardInterrupt:
        for p in node.peers:
            try:
                p.conn.send(tp.ProtocolError(tp.ERR_SHUTDOWN, "server interrupted"))
                p.conn.close()
            except OSError:
                pass
        write_summary(out / "summary.json", cfg, status="interrupted", role="server",
                      optimizer_steps=node.opt.t, wall_s=time.perf_counter() - t0)
        return 130
    write_summary(out / "summary.json", cfg, status="ok", role="server", wall_s=time.perf_counter() - t0,
                  optimizer_steps=res.optimizer_steps, forward_passes=res.forward_passes, skipped=res.skipped)
    print(f"server done: {res.optimizer_steps} optimizer steps")
    return EXIT_OK


def _train_client(cfg: RunConfig, args, out: Path) -> int:
    if args.client_id is None or not 0 <= args.client_id < cfg.n_clients:
        raise UsageError(f"--client-id must be in [0, {cfg.n_clients})")
    host, port = _hostport(args.connect or f"127.0.0.1:{tp.DEFAULT_PORT}")
    front, _, tail = split(GLMModel(cfg.model_config, seed=cfg.seed))
    train, _ = build_task(cfg)
    shard = shard_data(cfg, train)[args.client_id]
    conn = tp.connect(host, port, retry_for=args.connect_wait)
    # keys come from OS entropy here, not from the run seed
    node = ClientNode(args.client_id, clone_front(front), clone_tail(tail), shard, cfg, conn, rng_seed=None)
    t0 = time.perf_counter()
    try:
        client_program(node, cfg.strategy, cfg.steps, cfg.n_clients, cfg.averaging["period_steps"])
    except KeyboardInterrupt:
        try:
            conn.send(tp.ProtocolError(tp.ERR_SHUTDOWN, f"client {args.client_id} interrupted"))
            conn.close()
        except OSError:
            pass
        write_metrics(out / "metrics.csv", node.records)
        write_summary(out / "summary.json", cfg, status="interrupted", role="client",
                      client_id=args.client_id, steps_done=len(node.records), wall_s=time.perf_counter() - t0)
        return 130
    write_metrics(out / "metrics.csv", node.records)
    write_summary(out / "summary.json", cfg, status="ok", role="client", client_id=args.client_id,
                  steps_done=len(node.records), wall_s=time.perf_counter() - t0)
    print(f"client {args.client_id} done: {len(node.records)} steps")
    return EXIT_OK


# ---------------------------------------------------------------- bench / attack / keygen


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    counts = tuple(int(x) for x in args.clients_list.split(","))
    strategies = tuple(args.strategies.split(","))
    rows = bn.bench(cfg, counts, strategies, samples=args.samples, executor=args.bench_executor)
    print(f"fixed budget {args.samples} samples, {bn.cpu_count()} usable cores")
    print(bn.format_table(rows))
    if args.json:
        Path(args.json).write_text(json.dumps({"config": cfg.to_dict(), "rows": bn.rows_as_dicts(rows)}, indent=2))
    return EXIT_OK


def cmd_attack(args) -> int:
    kw = {}
    if args.config:
        kw = json.loads(Path(args.config).read_text())
    for k in ("epochs", "n_shadow", "n_victim"):
        v = getattr(args, k)
        if v is not None:
            kw[k] = v
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = atk.differential(seeds, **kw)
    for row in result["per_seed"]:
        e, b = row[atk.EMBEDDING_ONLY], row[atk.FRONT_BLOCK]
        print(f"seed {row['seed']}: embedding-only acc {e['accuracy']:.3f} rouge1 {e['rouge_1']:.3f} | "
              f"front-block acc {b['accuracy']:.3f} rouge1 {b['rouge_1']:.3f}")
    print(atk.report_json(result["mean"]))
    if args.json:
        Path(args.json).write_text(atk.report_json(result))
    return EXIT_OK


def cmd_keygen(args) -> int:
    pub, priv = crypto.keygen(args.bits)
    body = {"bits": args.bits, "n": format(pub.n, "x"), "e": pub.e, "d": format(priv.d, "x")}
    if args.out:
        fd = os.open(args.out, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            json.dump(body, fh, indent=2)
        print(f"wrote {args.bits}-bit keypair to {args.out}")
    print(pub.to_hex(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def greedy_decode(logits_fn, prompt, n_tokens: int) -> list[int]:
    seq = list(prompt)
    out = []
    for _ in range(n_tokens):
        nxt = int(np.argmax(np.asarray(logits_fn(np.asarray(seq)))[-1]))
        out.append(nxt)
        seq.append(nxt)
    return out


def load_task_file(path) -> list[dict]:
    """JSON list (or JSON lines) of {"input": [...], "candidates": [[...], ...], "label": k}
    or {"input": [...], "reference": [...]} items."""
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def evaluate(model: GLMModel, items: list[dict]) -> dict:
    fn = model_logits_fn(model)
    correct, n_cls, cands, refs = 0, 0, [], []
    for it in items:
        x = it["input"]
        if "candidates" in it:
            n_cls += 1
            correct += int(choose(fn, x, it["candidates"]) == it["label"])
        elif "reference" in it:
            cands.append(greedy_decode(fn, x, len(it["reference"])))
            refs.append(list(it["reference"]))
        else:
            raise ConfigValidationError("task item needs 'candidates' or 'reference'")
    out = {"n_items": len(items)}
    if n_cls:
        out["accuracy"] = correct / n_cls
    if refs:
        rep = score_pairs(cands, refs)
        out.update(token_accuracy=rep.accuracy, rouge_1=rep.rouge_1, rouge_2=rep.rouge_2,
                   rouge_l=rep.rouge_l, bleu_4=rep.bleu_4)
    return out


def task_items(samples: list[Sample], kind: str) -> list[dict]:
    items = []
    for s in samples:
        if kind == "cloze":
            items.append({"input": s.ids.tolist(), "candidates": [[t] for t in LABEL_TOKENS], "label": int(s.label)})
        else:
            pos = int(np.argmax(s.targets >= 0))
            items.append({"input": s.ids[:pos + 1].tolist(), "reference": s.targets[pos:].tolist()})
    return items


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    res = evaluate(model, load_task_file(args.task))
    print(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_make_task(args) -> int:
    gen = cloze_classification if args.kind == "cloze" else copy_task
    samples = gen(args.n, seed=args.seed)
    Path(args.out).write_text(json.dumps(task_items(samples, args.kind)))
    print(f"wrote {args.n} {args.kind} items to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p, with_strategy=True):
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. crypto.rsa_bits=1024")
    p.add_argument("--seed", type=int)
    if with_strategy:
        p.add_argument("--strategy", choices=["serial", "client_batch", "hierarchical"])
        p.add_argument("--clients", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--executor", choices=["thread", "process"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flglm", description="Split federated training of a small GLM-style model.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run one training job")
    _common(p)
    p.add_argument("--transport", choices=["loopback", "tcp"])
    p.add_argument("--role", choices=["local", "server", "client"], default="local")
    p.add_argument("--bind", help="server listen address host:port")
    p.add_argument("--connect", help="client target host:port")
    p.add_argument("--client-id", type=int)
    p.add_argument("--connect-wait", type=float, default=0.0, metavar="SECONDS",
                   help="client: keep retrying a refused connect this long")
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench", help="wall time per strategy at a fixed sample budget")
    _common(p, with_strategy=False)
    p.add_argument("--clients-list", default="2,4,8")
    p.add_argument("--strategies", default="serial,client_batch,hierarchical")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--bench-executor", choices=["thread", "process"], default="process")
    p.add_argument("--json")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("attack", help="inversion attack on both split variants")
    p.add_argument("--config", help="JSON of AttackConfig fields")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-shadow", dest="n_shadow", type=int)
    p.add_argument("--n-victim", dest="n_victim", type=int)
    p.add_argument("--json")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("keygen", help="generate an RSA keypair")
    p.add_argument("--bits", type=int, default=2048)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("eval", help="score a checkpoint on a task file")
    p.add_argument("checkpoint")
    p.add_argument("task")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("make-task", help="write a synthetic task file for eval")
    p.add_argument("kind", choices=["copy", "cloze"])
    p.add_argument("out")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=10_007)
    p.set_defaults(fn=cmd_make_task)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigValidationError, ConfigError, UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PROTOCOL_ERRORS as exc:
        print(f"protocol error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except PartyFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_PROTOCOL if _is_protocol_failure(exc) else 1


if __name__ == "__main__":
    sys.exit(main())
