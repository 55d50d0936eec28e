"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line."""
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from gear.autodiff import (Tape, Tensor, abs_, add, backward, concat_last, finite_diff_check, matmul,
                           mean, mul, param_gradcheck, relu, reshape, row_softmax, softplus, stack,
                           sub, sum_, take_rows, transpose)
from gear.data import SyntheticSpec, generate_synthetic
from gear.experiment import ExperimentConfig, run_experiment, summary_accuracy
from gear.losses import gmae, ipw_factor, mae
from gear.metrics import compute_metrics
from gear.ood import (AnnealSchedule, CategoryScheme, OODConfig, anneal_balance, balance_clusters,
                      build_ood_suite, imbalance_energy, kmeans_fit, pooled)
from gear.rng import make_rng
from gear.training import compute_objective


def verdict(n, ok, detail):
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_criterion_1_gradient_identity():
    t0 = time.perf_counter()
    e = np.random.default_rng(1).uniform(0.0, 5.0, 1000)
    e = np.clip(e, 1e-6, None)
    grads = []
    for loss in (gmae, mae):
        with Tape():
            yb = Tensor(np.zeros_like(e), grad_enabled=True)
            # d/dy_b = -d/de since e = y - y_b > 0
            grads.append(-backward(sum_(loss(Tensor(e), yb)))[yb])
    g_gmae, g_mae = grads
    err = float(np.max(np.abs(g_gmae - 2.0 / (1.0 + np.exp(e)) * g_mae)))
    dt = time.perf_counter() - t0
    verdict(1, err < 1e-9 and dt < 1.0, f"max |dGMAE - w(e) dMAE| = {err:.2e} (< 1e-9), {dt:.3f}s (< 1s)")


def _op_suite_max_err():
    r = np.random.default_rng(2)
    other, w, proj = (Tensor(r.normal(size=s)) for s in ((3, 4), (4, 2), (3, 4)))
    ops = [lambda x: add(x, other), lambda x: sub(other, x), lambda x: mul(x, other), relu, abs_,
           softplus, lambda x: matmul(x, w), lambda x: reshape(x, (4, 3)), lambda x: transpose(x, (1, 0)),
           lambda x: concat_last([x, other]), lambda x: stack([x, other], axis=0),
           lambda x: take_rows(x, [0, 2, 2]), lambda x: sum_(x, axis=1), lambda x: mean(x, axis=0),
           row_softmax]
    worst = 0.0
    for op in ops:
        def f(x, op=op):
            y = op(x)
            return sum_(mul(y, Tensor(np.resize(proj.data.ravel(), y.shape))))
        x0 = r.normal(size=(3, 4))
        x0[np.abs(x0) < 1e-3] += 0.01
        worst = max(worst, finite_diff_check(f, x0))
    return worst, len(ops)


def test_criterion_2_autodiff(tiny_model, batch4, tiny_cfg):
    t0 = time.perf_counter()
    op_err, n_ops = _op_suite_max_err()
    loss = lambda: compute_objective(tiny_model, batch4, tiny_cfg, make_rng(0, "swap"), True)[0].total
    obj = param_gradcheck(loss, tiny_model.parameters(), per="tensor")
    obj_err = max(obj.values())
    dt = time.perf_counter() - t0
    ok = op_err < 1e-4 and obj_err < 1e-4 and dt < 30.0
    verdict(2, ok, f"{n_ops} ops max rel err {op_err:.2e}; full objective ({len(obj)} tensors) "
                   f"max rel err {obj_err:.2e}; {dt:.1f}s (< 30s)")


def test_criterion_3_routing(tiny_model, batch4, tiny_cfg):
    with Tape():
        bd, _ = compute_objective(tiny_model, batch4, tiny_cfg, make_rng(0, "swap"), True)
        g_ipw = backward(add(bd.l_ipw, bd.l_ipw_hat))
    with Tape():
        bd, _ = compute_objective(tiny_model, batch4, tiny_cfg, make_rng(0, "swap"), True)
        root = bd.l_gmae[0]
        for t in bd.l_gmae[1:] + bd.l_gmae_hat:
            root = add(root, t)
        g_gmae = backward(root)
    zero = lambda g: g is None or not np.any(g)
    params = tiny_model.params
    ipw_on_biased = [n for n, p in params.items() if tiny_model.is_biased_param(n) and not zero(g_ipw.get(p))]
    gmae_on_robust = [n for n, p in params.items() if not tiny_model.is_biased_param(n)
                      and not zero(g_gmae.get(p))]
    verdict(3, not ipw_on_biased and not gmae_on_robust,
            f"IPW->biased nonzero: {ipw_on_biased or 'none'}; GMAE->robust nonzero: {gmae_on_robust or 'none'}")


def test_criterion_4_ipw_bounds():
    r = np.random.default_rng(4)
    psi = 10 ** r.uniform(-3, 3, 10_000)
    err = r.uniform(0, 6, 10_000)
    f = ipw_factor(psi, err)
    in_range = bool(np.all((f > 0) & (f <= 1)))
    d_psi, d_err = 10 ** r.uniform(-4, 2, 10_000), r.uniform(0, 3, 10_000)
    mono = bool(np.all(ipw_factor(psi + d_psi, err) <= f) and np.all(ipw_factor(psi, err + d_err) <= f))
    verdict(4, in_range and mono, f"factor in (0,1]: {in_range}; non-increasing in psi and err: {mono}")


def test_criterion_5_ood_exactness():
    _, test = generate_synthetic(SyntheticSpec(n_train=0, n_test=1000, rho=0.9, seed=5))
    labels = np.array([r.label for r in test])
    cats = CategoryScheme().categorize(labels)
    unequal = 0
    for m in ("audio", "video"):
        cm = kmeans_fit(pooled(test, m), 100, seed=1)
        kept, _ = balance_clusters(cm, labels, seed=2)
        for c in range(cm.k):
            members = kept[cm.assignments[kept] == c]
            unequal += int(np.sum(cats[members] == 0) != np.sum(cats[members] == 1))

    fx = np.random.default_rng(20240)
    attrs = [sorted(fx.choice(6, size=int(fx.integers(1, 4)), replace=False).tolist()) for _ in range(12)]
    lab12 = fx.choice([-1.5, 1.5], size=12)
    c12 = CategoryScheme().categorize(lab12)
    e_star = min(imbalance_energy(attrs, c12, np.array([(s >> i) & 1 for i in range(12)], dtype=bool))
                 for s in range(2 ** 12) if bin(s).count("1") >= 6)
    sched = AnnealSchedule(t0=1.0, alpha=0.999, steps=10_000)
    hits = sum(anneal_balance(attrs, lab12, schedule=sched, seed=s, floor=0.5)[1].best_energy == e_star
               for s in range(100))

    suite = build_ood_suite(test, OODConfig(steps=20_000, floor=0.25))
    ids = {r.id for r in test}
    subsets = all({r.id for r in s.records} <= ids for s in suite.values())
    verdict(5, unequal == 0 and hits >= 95 and subsets,
            f"clusters with unequal categories: {unequal}; anneal hit E*={e_star:.0f} on {hits}/100 seeds "
            f"(>= 95); OOD sets subset of IID: {subsets}")


CRITERION_6 = {
    "synthetic": {"n_train": 4000, "n_test": 1000, "rho": 0.9, "d_a": 8, "d_v": 8, "seed": 0},
    "train": {"d_s": 32, "batch_size": 32, "lam": 10.0, "beta": 0.3, "swap_epoch": 3, "max_epochs": 30,
              "strategy": "avg", "ipw_c": 1.0},
    "ood": {"floor": 0.25},
    "seeds": [0, 1, 2],
    "variants": ["gear", "erm", "wo_ipw", "wo_gmae", "wo_swap"],
}


@pytest.fixture(scope="module")
def debias_run():
    t0 = time.perf_counter()
    reports = run_experiment(ExperimentConfig.from_dict(CRITERION_6))
    return reports, time.perf_counter() - t0


def test_criterion_6_debiasing_gap(debias_run):
    reports, dt = debias_run
    tav = summary_accuracy(reports, "ood_tav")
    iid = summary_accuracy(reports, "iid")
    drop = iid["erm"] - tav["erm"]
    gain = tav["gear"] - tav["erm"]
    below = {v: tav[v] < tav["gear"] for v in ("wo_ipw", "wo_gmae", "wo_swap")}
    parts = {"a": drop >= 8.0, "b": gain >= 5.0, "c": all(below.values()), "time": dt < 600.0}
    table = " ".join(f"{v}={tav[v]:.2f}" for v in tav)
    verdict(6, all(parts.values()),
            f"(a) ERM IID {iid['erm']:.2f} -> OOD-TAV {tav['erm']:.2f}, drop {drop:.2f} (>= 8): {parts['a']}; "
            f"(b) GEAR - ERM on OOD-TAV {gain:+.2f} (>= 5): {parts['b']}; "
            f"(c) ablations below GEAR {below}: {parts['c']}; runtime {dt:.0f}s (< 600): {parts['time']}; "
            f"OOD-TAV {table}")


def _brute_metrics(preds, labels):
    out = {}
    for tag, keep in (("nonneg", np.ones(len(labels), bool)), ("pos", labels != 0)):
        p, y = (preds[keep] >= 0).astype(int), (labels[keep] >= 0).astype(int)
        cm = np.zeros((2, 2), int)
        for a, b in zip(y, p):
            cm[a, b] += 1
        n = cm.sum()
        f1 = sum(cm[c].sum() / n * (2 * cm[c, c] / (cm[c].sum() + cm[:, c].sum()))
                 for c in (0, 1) if cm[c].sum())
        out[f"acc2_{tag}"], out[f"f1_{tag}"] = 100 * np.trace(cm) / n, 100 * f1
    return out


def test_criterion_7_metrics_oracle():
    m = compute_metrics([-1, 0.5, 0.0, 2.0], [-2, 1, 0, -1])
    fixture = round(m["acc2_nonneg"], 2) == 75.0 and round(m["acc2_pos"], 2) == 66.67
    r = np.random.default_rng(7)
    mismatches = 0
    for _ in range(100):
        n = int(r.integers(1, 51))
        labels = r.choice(np.linspace(-3, 3, 13), size=n)
        labels[0] = labels[0] or 1.0
        preds = np.round(r.uniform(-3, 3, size=n), 1)
        got, want = compute_metrics(preds, labels), _brute_metrics(preds, labels)
        mismatches += int(any(abs(got[k] - want[k]) > 1e-9 for k in want))
    verdict(7, fixture and mismatches == 0,
            f"fixture acc {m['acc2_nonneg']:.2f}/{m['acc2_pos']:.2f} (75.00/66.67): {fixture}; "
            f"oracle mismatches on 100 fixtures: {mismatches}")


def test_criterion_8_determinism(tmp_path):
    cfg = {
        "synthetic": {"n_train": 300, "n_test": 200, "seed": 3},
        "train": {"max_epochs": 4, "swap_epoch": 1},
        "ood": {"k": 20, "steps": 5000, "floor": 0.25},
        "seeds": [0, 1],
    }
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    outs = []
    for tag in ("a", "b"):
        subprocess.run([sys.executable, "-m", "gear.cli", "run", "--config", str(tmp_path / "exp.json"),
                        "--out", str(tmp_path / tag)], check=True, capture_output=True)
        outs.append((tmp_path / tag / "report.json").read_bytes())
    verdict(8, outs[0] == outs[1], f"report.json byte-identical across two runs: {outs[0] == outs[1]} "
                                   f"({len(outs[0])} bytes)")
