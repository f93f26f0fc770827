"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Slow criteria are marked ``slow``; run only the fast ones with ``-m "not slow"``.
"""

import time

import numpy as np
import pytest

from flglm import attack as atk
from flglm import bench as bn
from flglm.config import RunConfig
from flglm.orchestrator import run

import cases
from acceptance_report import report


def check(number, name, ok, detail, limit_s=None, elapsed=None):
    if limit_s is not None:
        detail += f"; {elapsed:.1f}s of {limit_s:.0f}s"
        ok = ok and elapsed < limit_s
    report(number, name, "PASS" if ok else "FAIL", detail)
    assert ok, detail


def test_criterion_01_split_equivalence():
    t = time.perf_counter()
    r = cases.split_equivalence(n_cases=100, seed=0)
    el = time.perf_counter() - t
    ok = r["max_logit_diff"] <= 1e-9 and r["max_grad_rel_err"] <= 1e-9
    check(1, "split equivalence", ok,
          f"max logit diff {r['max_logit_diff']:.2e}, max grad rel err {r['max_grad_rel_err']:.2e} (tol 1e-9)",
          60, el)


def test_criterion_02_autograd_finite_differences():
    t = time.perf_counter()
    ops = cases.fd_sweep(n_trials=10, seed=0)
    model = cases.model_fd(seed=0)
    el = time.perf_counter() - t
    worst_op = max(ops, key=ops.get)
    ok = max(ops.values()) <= 1e-4 and model <= 1e-4
    check(2, "autograd soundness", ok,
          f"{len(ops)} ops, worst {worst_op} {ops[worst_op]:.2e}, whole model {model:.2e} (tol 1e-4)", 60, el)


def test_criterion_03_rsa():
    t = time.perf_counter()
    r = cases.rsa_checks(n_roundtrips=1000, bits=2048, seed=0)
    el = time.perf_counter() - t
    ok = r["textbook"] and r["mr_mismatches"] == 0 and r["roundtrips_ok"] == r["roundtrips"]
    check(3, "RSA", ok,
          f"textbook d=2753/c=2790 {r['textbook']}, Miller-Rabin mismatches below 1e4: {r['mr_mismatches']}, "
          f"2048-bit round trips {r['roundtrips_ok']}/{r['roundtrips']}", 60, el)


def test_criterion_04_client_batch_equivalence():
    t = time.perf_counter()
    r = cases.client_batch_equivalence(n_clients=4, seed=0)
    el = time.perf_counter() - t
    ok = r["boundary_grad_rel_err"] <= 1e-9 and r["activation_rel_err"] <= 1e-9
    check(4, "client-batch equivalence", ok,
          f"M=4 boundary grad rel err {r['boundary_grad_rel_err']:.2e}, "
          f"activation rel err {r['activation_rel_err']:.2e} (tol 1e-9)", 60, el)


@pytest.mark.slow
def test_criterion_05_throughput_scaling():
    cfg = RunConfig()
    t = time.perf_counter()
    cb = bn.bench(cfg, (2, 4, 8), ("serial", "client_batch"), samples=1000, executor="process")
    hier = bn.bench(cfg, (2, 3, 5), ("hierarchical",), samples=1000, executor="process")
    el = time.perf_counter() - t
    ratios = {r.n_clients: r.ratio_vs_serial for r in cb if r.strategy == "client_batch"}
    walls = [r.wall_s for r in sorted(hier, key=lambda r: r.n_clients)]
    limits = {2: 0.65, 4: 0.40, 8: 0.30}
    ok = all(ratios[m] <= limits[m] for m in limits) and all(a > b for a, b in zip(walls, walls[1:]))
    detail = (f"client-batch/serial ratio M=2 {ratios[2]:.2f} (<=0.65), M=4 {ratios[4]:.2f} (<=0.40), "
              f"M=8 {ratios[8]:.2f} (<=0.30); hierarchical wall M=2,3,5 "
              + "/".join(f"{w:.1f}s" for w in walls))
    cores = bn.cpu_count()
    if cores < 4:
        report(5, "throughput scaling", "SKIP", f"host has {cores} usable core(s), needs >= 4; measured {detail}")
        pytest.skip(f"needs a >=4-core host, found {cores}; measured {detail}")
    check(5, "throughput scaling", ok, detail, 600, el)


@pytest.mark.slow
def test_criterion_06_security_differential():
    t = time.perf_counter()
    res = atk.differential(seeds=(0, 1, 2))
    el = time.perf_counter() - t
    parts, ok = [], True
    for row in res["per_seed"]:
        e, b = row[atk.EMBEDDING_ONLY], row[atk.FRONT_BLOCK]
        ratio = e["accuracy"] / max(b["accuracy"], 1e-12)
        seed_ok = ratio >= 3.0 and b["rouge_1"] < e["rouge_1"]
        ok = ok and seed_ok
        parts.append(f"seed {row['seed']} acc {e['accuracy']:.3f}/{b['accuracy']:.3f}={ratio:.2f}x "
                     f"rouge1 {e['rouge_1']:.3f}>{b['rouge_1']:.3f}")
    check(6, "security differential", ok, "; ".join(parts) + " (need acc ratio >= 3x every seed)", 900, el)


def test_criterion_07_fedavg_algebra():
    t = time.perf_counter()
    r = cases.fedavg_algebra()
    el = time.perf_counter() - t
    check(7, "federated averaging algebra", all(r.values()),
          ", ".join(f"{k} {v}" for k, v in r.items()), 60, el)


def test_criterion_08_ptuning_freeze():
    t = time.perf_counter()
    r = cases.ptuning_freeze(steps=50, prefix_len=8)
    el = time.perf_counter() - t
    ok = r["base_delta"] == 0.0 and r["prefix_delta"] > 0 and r["lp0_equals_vanilla"]
    check(8, "p-tuning freeze", ok,
          f"base delta {r['base_delta']}, prefix delta {r['prefix_delta']:.3g}, "
          f"L_p=0 equals vanilla {r['lp0_equals_vanilla']}", 60, el)


@pytest.mark.slow
def test_criterion_09_key_rotation():
    t = time.perf_counter()
    probe = cases.rotation_probe(period=5, rsa_bits=2048)
    res = run(RunConfig().with_overrides(crypto={"rotation_period": 5}, steps=300))
    el = time.perf_counter() - t
    ok = probe["rotated"] and probe["old_payload_rejected"] and res.loss_ratio <= 0.5
    check(9, "key rotation", ok,
          f"round-4 payload rejected after round-5 rekey {probe['old_payload_rejected']}, "
          f"2048-bit training loss ratio {res.loss_ratio:.3f} (<=0.5)", 300, el)


@pytest.mark.slow
def test_criterion_10_smoke_convergence():
    t = time.perf_counter()
    got = {s: run(RunConfig(strategy=s)).loss_ratio for s in ("serial", "client_batch", "hierarchical")}
    el = time.perf_counter() - t
    check(10, "smoke convergence", all(v <= 0.5 for v in got.values()),
          ", ".join(f"{k} loss ratio {v:.3f}" for k, v in got.items()) + " (<=0.5 in 300 steps)", 600, el)


@pytest.mark.slow
def test_criterion_11_non_iid_informational():
    r = cases.non_iid_degradation(seeds=(0, 1, 2, 3, 4), steps=300)
    holds = r["client_batch_drop"] <= r["serial_drop"]
    report(11, "non-IID demonstration", "INFO",
           f"mean accuracy drop IID->label skew: client-batch {r['client_batch_drop']:+.3f}, "
           f"serial {r['serial_drop']:+.3f}; inequality {'holds' if holds else 'does not hold'} (non-gating)")
    for row in r["per_seed"]:
        assert all(0.0 <= row[k] <= 1.0 for k in row if k.endswith(("iid", "skew")))
