"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The super-resolution runs are shared between criteria 5 to 7 through a
module-level cache, so the budgets there count only new work.
"""

import time

import numpy as np
import pytest

from varproreg import autodiff as ad, harness, multiscale as ms, problems, registration as reg
from varproreg import superres as sr
from varproreg.imaging import PoolOperator, pool, pool_adjoint
from varproreg.optim import (LMConfig, ProjectionPolicy, TrustRegionConfig, levenberg_marquardt,
                             solve_tr_subproblem, trust_region_newton)

from conftest import central_diff, rel_err

SEEDS = (0, 1, 2)
GN_ITERS = 10
CG = 200


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail, elapsed, budget):
        ok = bool(ok) and elapsed < budget
        line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s / {budget}s]"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _report


# ---------------------------------------------------------------------------
# 1-4: properties


def test_01_derivative_exactness(report):
    t0 = time.perf_counter()
    prob, _ = problems.rotated_pair(16, 30.0, lam=0.1)
    rng = np.random.default_rng(2024)
    worst = dict(grad=0.0, hess=0.0, dtheta=0.0, varpro=0.0, asym=0.0)
    for _ in range(20):
        w = reg.IDENTITY + 0.05 * rng.standard_normal(6)
        theta = rng.uniform(0.5, 8.0)
        f = lambda v: reg.loss(prob, v, theta)
        g = reg.grad_loss(prob, w, theta)
        worst["grad"] = max(worst["grad"], rel_err(g, central_diff(f, w, 1e-6)))
        H, asym = ad.hessian(f, w, return_asymmetry=True)
        worst["asym"] = max(worst["asym"], asym)
        fdH = central_diff(lambda v: reg.grad_loss(prob, v, theta), w, 1e-6)
        worst["hess"] = max(worst["hess"], rel_err(H, fdH))
        h = 1e-4 * max(theta, 1.0)
        fd_t = (reg.grad_loss(prob, w, theta + h) - reg.grad_loss(prob, w, theta - h)) / (2 * h)
        worst["dtheta"] = max(worst["dtheta"], rel_err(reg.dtheta_grad(prob, w, theta), fd_t))
    data, truth = problems.superres_problem(0, n=8, q=2)
    obj = sr.VarproObjective(data, ProjectionPolicy.full(CG))
    w0 = data.identity_params()
    for _ in range(20):
        w = w0 + rng.uniform(0.2, 0.8) * (truth.w_true - w0) + 0.002 * rng.standard_normal(w0.size)
        J = obj.jacobian(w)
        worst["varpro"] = max(worst["varpro"], rel_err(J, central_diff(obj.residual, w, 1e-6)))
    ok = max(worst[k] for k in ("grad", "hess", "dtheta", "varpro")) < 1e-5 and worst["asym"] < 1e-8
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(1, ok, f"max rel. errors over 20 points each: {detail}", time.perf_counter() - t0, 60)


def test_02_adjoints(report):
    t0 = time.perf_counter()
    data, truth = problems.superres_problem(0)
    n = data.fine.n
    rng = np.random.default_rng(5)
    w = data.identity_params() + 0.5 * (truth.w_true - data.identity_params())
    pool_op = PoolOperator(data.k, data.fine)
    blk = sr.build_interp_block(data.fine, truth.w_true[:6])
    L = sr.GradRegularizer(data.fine)
    op = sr.StackedOperator(data, w)
    cases = {
        "pool": (lambda x: pool(pool_op, x), lambda y: pool_adjoint(pool_op, y), data.coarse.n),
        "interp": (blk.apply, blk.adjoint, n),
        "L": (L.apply, L.adjoint, L.rows),
        "stacked": (op.matvec, op.rmatvec, op.shape[0]),
    }
    worst, worst_ad = 0.0, 0.0
    for fwd, adj, m in cases.values():
        for _ in range(5):
            x, y = rng.standard_normal(n), rng.standard_normal(m)
            gap = abs(np.dot(fwd(x), y) - np.dot(x, adj(y))) / (np.linalg.norm(x) * np.linalg.norm(y))
            worst = max(worst, gap)
        ay = ad.adjoint_apply(fwd, y, n)
        worst_ad = max(worst_ad, np.linalg.norm(ay - adj(y)) / (np.linalg.norm(adj(y)) + 1e-300))
    ok = worst < 1e-12 and worst_ad < 1e-12
    report(2, ok, f"n={n}; max |<Ax,y>-<x,A'y>|/(|x||y|)={worst:.1e}; adjoint_apply rel={worst_ad:.1e}",
           time.perf_counter() - t0, 60)


def test_03_projection_oracle(report):
    t0 = time.perf_counter()
    data, truth = problems.superres_problem(0)
    w = data.identity_params() + 0.5 * (truth.w_true - data.identity_params())
    op = sr.StackedOperator(data, w)
    f = np.asarray(sr.project(op, sr.high_accuracy_policy(data.fine.n)))
    A = op.dense()
    f_ref = np.linalg.solve(A.T @ A, A.T @ op.b)
    err = rel_err(f, f_ref)
    report(3, err < 1e-6, f"n={data.fine.n}, 5n CG vs dense normal equations: rel={err:.1e}",
           time.perf_counter() - t0, 120)


def test_04_taylor_slopes(report):
    t0 = time.perf_counter()
    data, w, v = harness.taylor_setup()
    hs = 10.0 ** -np.arange(0.5, 6.01, 0.5)
    curves = {lab: harness.taylor_errors(data, w, v, harness.parse_policy(lab, CG), hs)
              for lab in ("none", "full", "last0.7")}
    s_full, s_none = harness.fit_slope(hs, curves["full"]), harness.fit_slope(hs, curves["none"])
    small = hs <= 1e-3 + 1e-15
    above = bool(np.all(curves["last0.7"][small] > curves["none"][small]))
    ok = 1.8 <= s_full <= 2.2 and 0.8 <= s_none <= 1.2 and above
    report(4, ok, f"slopes full={s_full:.3f} none={s_none:.3f}; 0.7 above none at h<=1e-3: {above}",
           time.perf_counter() - t0, 300)


# ---------------------------------------------------------------------------
# 5-7: super-resolution policy grid

_RUNS = {}


def _run(seed, label, cg):
    key = (seed, label, cg)
    if key not in _RUNS:
        _RUNS[key] = harness.run_superres_cell(seed, label, harness.parse_policy(label, cg), gn_iters=GN_ITERS)
    return _RUNS[key]


def _final(run):
    return sr.final_record(run.records)


def test_05_full_beats_none(report):
    t0 = time.perf_counter()
    ok, parts = True, []
    for seed in SEEDS:
        full, none = _run(seed, "full", CG), _run(seed, "none", CG)
        lf, ln = _final(full)["rel_loss"], _final(none)["rel_loss"]
        ok &= full.recon_error < none.recon_error and lf < ln
        parts.append(f"s{seed}: recon {full.recon_error:.3f}<{none.recon_error:.3f}, loss {lf:.4f}<{ln:.4f}")
    report(5, ok, "; ".join(parts), time.perf_counter() - t0, 600)


def test_06_last_fraction_ordering(report):
    t0 = time.perf_counter()
    ok, parts = True, []
    for seed in SEEDS:
        rl = {lab: _final(_run(seed, lab, CG))["rel_loss"] for lab in ("full", "last0.95", "last0.9", "last0.7", "none")}
        ordered = rl["full"] <= rl["last0.95"] <= rl["last0.9"]
        worse = rl["last0.7"] > rl["none"]
        ok &= ordered and worse
        parts.append(f"s{seed}: 1.0={rl['full']:.4f} 0.95={rl['last0.95']:.4f} 0.9={rl['last0.9']:.4f} "
                     f"0.7={rl['last0.7']:.4f} none={rl['none']:.4f} (order {ordered}, 0.7>none {worse})")
    report(6, ok, "; ".join(parts), time.perf_counter() - t0, 1800)


def test_07_inexact_projections(report):
    t0 = time.perf_counter()
    budgets = (10, 25, 50, 100, 200)
    ok, parts = True, []
    for seed in SEEDS:
        fin = {c: _final(_run(seed, "full", c)) for c in budgets}
        rl = {c: fin[c]["rel_loss"] for c in budgets}
        rg = {c: fin[c]["rel_grad"] for c in budgets}
        close = abs(rl[100] - rl[200]) <= 0.05 * rl[200]
        best_loss = set(sorted(budgets, key=lambda c: rl[c])[:2]) == {50, 100}
        best_grad = set(sorted(budgets, key=lambda c: rg[c])[:2]) == {50, 100}
        ok &= close and best_loss and best_grad
        parts.append(f"s{seed}: loss " + " ".join(f"{c}:{rl[c]:.5f}" for c in budgets)
                     + " grad " + " ".join(f"{c}:{rg[c]:.2e}" for c in budgets)
                     + f" (100~200 {close}, 50/100 best loss {best_loss}, best grad {best_grad})")
    report(7, ok, "; ".join(parts), time.perf_counter() - t0, 600)


# ---------------------------------------------------------------------------
# 8-11: registration, optimisers, timing


def test_08_pc_beats_single_scale(report):
    t0 = time.perf_counter()
    prob, _ = problems.rotated_pair()
    parts, ok = [], True
    for label, p in (("original", prob), ("swapped", prob.swapped())):
        w_s, _ = ms.run_single_scale(p)
        w_pc, _ = ms.run_predictor_corrector(p)
        s_single, s_pc = reg.ssd(p, w_s), reg.ssd(p, w_pc)
        ok &= s_single > 10 * s_pc
        parts.append(f"{label}: single={s_single:.2e} pc={s_pc:.2e}")
    report(8, ok, "; ".join(parts), time.perf_counter() - t0, 120)


def test_09_hessian_modes(report):
    t0 = time.perf_counter()
    prob, _ = problems.rotated_pair()
    _, ex = ms.run_predictor_corrector(prob, hessian_mode="exact")
    _, gn = ms.run_predictor_corrector(prob, hessian_mode="gauss_newton", lm_cfg=LMConfig(max_iters=300))
    pos = sum(r.rel_loss_diff > 0 for r in ex)
    neg = sum(r.rel_loss_diff < 0 for r in gn)
    ok = pos > len(ex) / 2 and neg > len(gn) / 2
    report(9, ok, f"exact: {pos}/{len(ex)} positive; Gauss-Newton: {neg}/{len(gn)} negative",
           time.perf_counter() - t0, 300)


def test_10_optimizer_oracles(report):
    t0 = time.perf_counter()
    worst = 0.0
    cases = [(np.diag([2.0, 1.0]), np.array([3.0, -2.0]), 0.5),
             (np.diag([1.0, -2.0]), np.array([1.0, 0.5]), 1.0),
             (np.diag([1.0, -2.0]), np.array([1.0, 0.0]), 1.0),  # hard case
             (np.array([[1.0, 0.3], [0.3, -0.5]]), np.array([0.0, 0.0]), 0.7)]
    t = np.linspace(0, 2 * np.pi, 1001)
    for H, g, radius in cases:
        s = solve_tr_subproblem(H, g, radius)
        m = g @ s + 0.5 * s @ H @ s
        best = 0.0
        for r in np.linspace(0, radius, 301):
            S = r * np.stack([np.cos(t), np.sin(t)], axis=1)
            best = min(best, (S @ g + 0.5 * np.einsum("ia,ab,ib->i", S, H, S)).min())
        worst = max(worst, m - best)
    rng = np.random.default_rng(0)
    A, b = rng.standard_normal((30, 5)), rng.standard_normal(30)
    _, tr = levenberg_marquardt(lambda x: A @ x - b, lambda x: A, np.zeros(5))
    lm_steps = sum(bool(r["accepted"]) for r in tr.records[1:])

    def rosen(x):
        return ad.add(ad.mul(100.0, ad.power(ad.sub(ad.take(x, 1), ad.power(ad.take(x, 0), 2)), 2)),
                      ad.power(ad.sub(1.0, ad.take(x, 0)), 2))

    w, _, rt = trust_region_newton(lambda x: float(rosen(x)), lambda x: ad.gradient(rosen, x),
                                   lambda x: ad.hessian(rosen, x), np.array([-1.2, 1.0]),
                                   TrustRegionConfig(max_iters=50))
    ok = worst <= 1e-3 and lm_steps <= 3 and rt.status == "converged" and np.allclose(w, 1, atol=1e-6)
    report(10, ok, f"subproblem excess over grid={worst:.1e}; LM accepted steps={lm_steps}; "
                   f"Rosenbrock {rt.status} in {rt.iterations} iterations",
           time.perf_counter() - t0, 60)


def test_11_timing(report, tmp_path):
    t0 = time.perf_counter()
    cfg = harness.load_config(experiment="timing", out=tmp_path)
    rep = harness.cmd_timing(cfg)
    fg, fh, fj = rep.factor("gradient"), rep.factor("hessian"), rep.factor("jacobian")
    ok = fg <= 8 and fh <= 40 and fj <= 25 and fh >= fg
    report(11, ok, f"gradient={fg:.1f}x hessian={fh:.1f}x (loss); jacobian={fj:.1f}x (forward)",
           time.perf_counter() - t0, 120)
