"""Wall-time comparison of training strategies at a fixed sample budget."""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass

from .config import RunConfig
from .orchestrator import run


@dataclass
class BenchRow:
    strategy: str
    n_clients: int
    samples: int
    server_steps: int
    wall_s: float
    ratio_vs_serial: float | None = None


def steps_for_budget(strategy: str, n_clients: int, samples: int) -> int:
    """Server-side step count that processes ``samples`` training samples."""
    if strategy == "serial":
        return samples
    return max(1, samples // n_clients)


def bench(cfg: RunConfig, client_counts=(2, 4, 8), strategies=("serial", "client_batch", "hierarchical"),
          samples: int = 1000, executor: str = "process", reference_clients: int = 2) -> list[BenchRow]:
    """Time every (strategy, M) pair; ratios are against serial with ``reference_clients``.

    Averaging and key rotation stay on, as in training.
    """
    base = cfg.with_overrides(executor=executor, transport={"mode": "socketpair"})
    rows = []
    serial_ref = None
    todo = [(s, m) for s in strategies for m in client_counts]
    if ("serial", reference_clients) not in todo:
        todo.insert(0, ("serial", reference_clients))
    for strategy, m in todo:
        steps = steps_for_budget(strategy, m, samples)
        c = base.with_overrides(strategy=strategy, n_clients=m, steps=steps)
        t = time.perf_counter()
        run(c)
        wall = time.perf_counter() - t
        row = BenchRow(strategy, m, samples, steps, wall)
        if strategy == "serial" and m == reference_clients:
            serial_ref = wall
        rows.append(row)
    for r in rows:
        r.ratio_vs_serial = r.wall_s / serial_ref if serial_ref else None
    wanted = {(s, m) for s in strategies for m in client_counts}
    return [r for r in rows if (r.strategy, r.n_clients) in wanted]


def format_table(rows: list[BenchRow]) -> str:
    head = f"{'strategy':<14}{'clients':>8}{'samples':>9}{'steps':>7}{'time(s)':>10}{'ratio':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        ratio = f"{r.ratio_vs_serial:.3f}" if r.ratio_vs_serial is not None else "-"
        lines.append(f"{r.strategy:<14}{r.n_clients:>8}{r.samples:>9}{r.server_steps:>7}{r.wall_s:>10.2f}{ratio:>8}")
    return "\n".join(lines)


def rows_as_dicts(rows):
    return [asdict(r) for r in rows]


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
