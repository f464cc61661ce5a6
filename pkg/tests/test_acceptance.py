"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed together in the
terminal summary. Criteria 7 and 8 run full benchmark protocols and take
several minutes each.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import (
    brier_reference,
    cindex_reference,
    survival_loglik_reference,
    ibs_fine_grid,
    quadrature_oracle,
    random_dataset,
    random_table_model,
    three_subject_dataset,
)
from pemsurv.baselines import glm_fit
from pemsurv.bench import (
    BenchConfig,
    ScalingConfig,
    rerun_manifest,
    run_benchmark,
    run_checks,
    run_scaling,
    same_results,
    scaling_checks,
    write_results,
)
from pemsurv.boost import BoostParams, SplitConstraint, fit, poisson_deviance, poisson_grad_hess
from pemsurv.metrics import brier, censoring_km, cindex_td, ibs
from pemsurv.ped import CutPoints, make_cutpoints, ped_loglik, poisson_loglik, transform
from pemsurv.predict import predict_cif, predict_survival
from pemsurv.synth import SynthConfig, generate


def record(number, title, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} [{number:>2}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.mark.filterwarnings("ignore:.*carried forward")
def test_01_likelihood_proportionality():
    rng = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        ds = random_dataset(rng, int(rng.integers(1, 21)), n_causes=int(rng.integers(1, 3)),
                            truncation=bool(rng.random() < 0.5), tvf=bool(rng.random() < 0.5))
        inner = np.sort(rng.uniform(0, ds.t_end.max(), int(rng.integers(1, 6))))
        cp = CutPoints(np.unique(np.r_[0.0, inner, ds.t_end.max()]))
        lam = rng.uniform(0.05, 4.0, (cp.n_intervals, ds.n_causes))
        ped = transform(ds, cp)
        per_row = lam[ped.interval - 1, ped.transition - 1]
        lhs = poisson_loglik(ped, per_row) - float(np.sum(ped.label * np.log(ped.toff)))
        worst = max(worst, abs(lhs - survival_loglik_reference(ds, cp.kappa, lam)), abs(ped_loglik(ped, per_row) - lhs))
    elapsed = time.perf_counter() - t0
    record(1, "likelihood proportionality", worst < 1e-10 and elapsed < 1.0,
           f"max |diff| = {worst:.2e}, {elapsed:.2f} s for 100 datasets")


def test_02_three_subject_golden():
    kappa = [0.0, 1.0, 1.5, 3.0]
    exit_time = {"1": 1.3, "2": 0.5, "3": 2.7}
    expected = [
        ("1", 1, 0, 1.0, 1), ("1", 2, 0, 1.5, 1), ("2", 1, 0, 1.0, 1),
        ("3", 1, 0, 1.0, 1), ("3", 2, 0, 1.5, 1), ("3", 3, 1, 3.0, 1),
        ("1", 1, 0, 1.0, 2), ("1", 2, 1, 1.5, 2), ("2", 1, 0, 1.0, 2),
        ("3", 1, 0, 1.0, 2), ("3", 2, 0, 1.5, 2), ("3", 3, 0, 3.0, 2),
    ]
    printed = [1.0, 0.3, 0.5, 1.0, 0.5, 1.2] * 2
    ped = transform(three_subject_dataset(), make_cutpoints(three_subject_dataset(), [1, 1.5, 3]))
    rows = list(ped.rows())
    ok = len(rows) == 12
    for row, exp, shown in zip(rows, expected, printed):
        i, j = exp[0], exp[1]
        ok &= (row.subject_id, row.j, row.label, row.tj, row.k) == exp
        ok &= row.toff == min(exit_time[i], kappa[j]) - kappa[j - 1]
        ok &= abs(row.toff - shown) < 1e-12
    record(2, "three-subject golden rows", bool(ok), f"{len(rows)} rows")


def test_03_occurrence_exposure():
    glm_err = gbt_root_err = gbt_int_err = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        ds = random_dataset(rng, 60, p=0, truncation=True)
        inner = np.quantile(ds.t_end[ds.status == 1], [0.25, 0.5, 0.75])
        ped = transform(ds, CutPoints(np.unique(np.r_[0.0, inner, ds.t_end.max()])))
        J = ped.cutpoints.n_intervals
        ev = np.bincount(ped.interval - 1, weights=ped.label, minlength=J)
        ex = np.bincount(ped.interval - 1, weights=ped.toff, minlength=J)
        glm = glm_fit(ped)
        glm_err = max(glm_err, np.max(np.abs(np.exp(glm.intercepts[0]) - ev / ex)))
        base = BoostParams(learning_rate=0.1, n_rounds=500, l2_lambda=0.0, min_child_weight=0.0, max_depth=8)
        root = fit(ped, base.replace(split_constraints=(SplitConstraint("tj", "ban", 0), SplitConstraint("k", "ban", 0))))
        gbt_root_err = max(gbt_root_err, np.max(np.abs(root.interval_hazards(np.zeros((1, 0)))[0, :, 0] - ev.sum() / ex.sum())))
        per_int = fit(ped, base.replace(split_constraints=(SplitConstraint("k", "ban", 0),)))
        gbt_int_err = max(gbt_int_err, np.max(np.abs(per_int.interval_hazards(np.zeros((1, 0)))[0, :, 0] - ev / ex)))
    ok = glm_err < 1e-6 and gbt_root_err < 1e-4 and gbt_int_err < 1e-4
    record(3, "occurrence/exposure oracle", ok,
           f"GLM {glm_err:.1e}, GBT root-only {gbt_root_err:.1e}, GBT per-interval {gbt_int_err:.1e}")


def test_04_gradient_correctness():
    rng = np.random.default_rng(4)
    margin = rng.uniform(-6, 4, 1000)
    y = rng.integers(0, 2, 1000).astype(float)
    g, h = poisson_grad_hess(margin, y)
    eps = 1e-5

    def grad_fd(m):
        return (poisson_deviance(y, m + eps) - poisson_deviance(y, m - eps)) / (4 * eps)

    h_fd = (grad_fd(margin + eps) - grad_fd(margin - eps)) / (2 * eps)
    g_err = np.max(np.abs(g - grad_fd(margin)) / np.maximum(np.abs(g), 1.0))
    h_err = np.max(np.abs(h - h_fd) / np.maximum(np.abs(h), 1.0))
    record(4, "gradient/hessian vs finite differences", g_err < 1e-5 and h_err < 1e-5,
           f"gradient {g_err:.1e}, hessian {h_err:.1e}")


def test_05_prediction_conservation():
    rng = np.random.default_rng(5)
    cons = quad_s = quad_f = 0.0
    for _ in range(20):
        m = random_table_model(rng, K=2)
        times = rng.uniform(0, m.cutpoints.max_time * 1.2, 100)
        S = predict_survival(m, np.zeros((1, 0)), times)[0]
        F = predict_cif(m, np.zeros((1, 0)), times)[:, 0, :]
        cons = max(cons, np.max(np.abs(S + F.sum(axis=0) - 1)))
        for i in range(0, 100, 10):
            s_ref, f_ref = quadrature_oracle(m, times[i])
            quad_s = max(quad_s, abs(S[i] - s_ref))
            quad_f = max(quad_f, np.max(np.abs(F[:, i] - f_ref)))
    ok = cons < 1e-10 and quad_s < 1e-8 and quad_f < 1e-8
    record(5, "prediction conservation and quadrature", ok,
           f"S+F1+F2-1 {cons:.1e}, S {quad_s:.1e}, F {quad_f:.1e}")


def test_06_metrics_oracles():
    rng = np.random.default_rng(6)
    b_err = c_err = i_err = 0.0
    for trial in range(30):
        n = int(rng.integers(8, 31))
        K = 1 + trial % 2
        ties = trial % 3 == 0
        time_ = rng.integers(1, 8, n).astype(float) if ties else rng.exponential(2.0, n)
        event = np.where(rng.random(n) < 0.65, rng.integers(1, K + 1, n), 0)
        event[0] = 1
        tr_time = np.r_[rng.exponential(2.0, 40), 100.0]
        tr_event = np.r_[np.where(rng.random(40) < 0.65, 1, 0), 1]
        G = censoring_km(tr_time, tr_event)
        cause = None if K == 1 else 1
        pred = rng.uniform(size=n)
        for t in rng.uniform(0, time_.max(), 3):
            b_err = max(b_err, abs(brier(time_, event, pred, t, G, cause)
                                   - brier_reference(time_, event, pred, t, tr_time, tr_event, cause)))
        tau = float(time_.max())
        risk = rng.normal(size=n)
        if (event == (1 if K > 1 else event)).any():
            c = cindex_td(time_, event, risk, tau, G, cause)
            c_err = max(c_err, abs(c - cindex_reference(time_, event, risk, tau, tr_time, tr_event, cause)))
        if trial < 10 and K == 1:
            rate = rng.uniform(0.2, 1.0, n)

            def pred_fn(ts):
                return np.exp(-np.outer(rate, ts))

            tau_i = float(np.quantile(time_[event > 0], 0.75))
            i_err = max(i_err, abs(ibs(time_, event, pred_fn, tau_i, G)
                                   - ibs_fine_grid(time_, event, pred_fn, tau_i, tr_time, tr_event)))
    ok = b_err < 1e-12 and c_err < 1e-12 and i_err < 1e-3
    record(6, "metrics vs brute-force references", ok,
           f"brier {b_err:.1e}, cindex {c_err:.1e}, ibs vs fine grid {i_err:.1e}")


# Reduced search budget: 4 random-search draws per replication (instead of 20)
# and a 1000-round cap, keeping all 10 replications at n = 1000.
BENCH_CFG = BenchConfig(scenario="tve", n=1000, replications=10, n_search=4, cv_folds=4, seed=0,
                        checks=("ibs_order", "gbt_wins"), min_wins=8)


@pytest.mark.slow
def test_07_synthetic_tve_benchmark():
    result = run_benchmark(BENCH_CFG)
    checks = run_checks(result, BENCH_CFG)
    summary = result.summary()
    means = summary[summary.horizon.isin(["Q50", "Q75"])].pivot(index="engine", columns="horizon", values="ibs")
    detail = "; ".join(f"{name} {'ok' if ok else 'failed'} ({d})" for name, ok, d in checks)
    print(means.to_string())
    record(7, "synthetic TVE benchmark direction", all(ok for _, ok, _ in checks), detail)


@pytest.mark.slow
def test_08_scaling_pattern():
    cfg = ScalingConfig(sizes=(400, 800, 1600), replications=10, n_sub=200, gap_from=1600)
    _, summary = run_scaling(cfg)
    print(summary.to_string(index=False))
    checks = scaling_checks(summary, cfg)
    detail = "; ".join(f"{name} {'ok' if ok else 'failed'} ({d})" for name, ok, d in checks)
    record(8, "cut-point scaling pattern", len(checks) == 3 and all(ok for _, ok, _ in checks), detail)


def test_09_split_constraints():
    ds = generate(SynthConfig(n=300, seed=9, scenario="tve_cr", n_noise=3)).dataset
    ped = transform(ds, make_cutpoints(ds, "subsample", n_sub=80, seed=9))
    params = BoostParams(n_rounds=25, max_depth=4, learning_rate=0.2)
    banned = fit(ped, params.replace(split_constraints=(SplitConstraint("tj", "ban", 0),)))
    haz = banned.interval_hazards(ds.X[:50])
    constant = bool(np.all(haz == haz[:, :1, :]))

    forced = fit(ped, params.replace(split_constraints=(SplitConstraint("k", "force", 0),)))
    k_idx = len(ds.feature_schema) + 1

    def reach(tree, node):
        seen, stack = set(), [node]
        while stack:
            i = stack.pop()
            seen.add(i)
            if tree.feature[i] >= 0:
                stack += [tree.left[i], tree.right[i]]
        return seen

    separated = all(
        t.feature[0] == k_idx and 1 < t.threshold[0] <= 2 and not reach(t, t.left[0]) & reach(t, t.right[0])
        for t in forced.trees
    )
    record(9, "split-constraint semantics", constant and separated,
           f"tj banned: hazard constant over intervals = {constant}; k forced at root: causes separated = {separated}")


def test_10_manifest_determinism(tmp_path):
    cfg = BenchConfig(n=300, replications=2, n_search=2, cv_folds=2, n_rounds=100, early_stopping_rounds=10,
                      cuts="sub:100", seed=10)
    first = run_benchmark(cfg)
    write_results(first, tmp_path)
    again = rerun_manifest(tmp_path / "manifest.json")
    ok = same_results(first.table, again.table) and first.manifest["results_sha256"] == again.manifest["results_sha256"]
    record(10, "bench manifest re-execution", ok, f"{len(first.table)} metric rows compared bit-exactly")
