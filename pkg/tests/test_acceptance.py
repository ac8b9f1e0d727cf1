"""Acceptance suite: one printed PASS/FAIL line per criterion, at the stated tolerances."""

import math
import time

import numpy as np
import pytest

import oracles
from ctmc_perturb import ibp, zoo
from ctmc_perturb import montecarlo as mc
from ctmc_perturb.perturbation import (regularity_equivalence_experiment, term_decomposition_check,
                                       volterra_solve)
from ctmc_perturb.qmatrix import Window, perturb
from ctmc_perturb.semigroup import (ode_solve, series_solve, series_terms, uniformization_solve)
from ctmc_perturb.transition import TimeGrid

EX1_WINDOW = Window(60)


def acceptance_models():
    r2, a2 = zoo.two_state(), zoo.two_state_perturbation()
    r20, a20 = zoo.random_pair(20, 7)
    r1, a1 = zoo.example1()
    return {"two_state": (r2, a2, Window(1)), "random20": (r20, a20, Window(19)),
            "example1": (r1, a1, EX1_WINDOW)}


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
        return ok
    return emit


def test_criterion_1_oracle_agreement(report):
    start = time.perf_counter()
    r, grid = zoo.two_state(), TimeGrid.uniform(1.0, 512)
    values = {
        "uniform": uniformization_solve(r, 1, grid).value(512, 0, 0),
        "ode": ode_solve(r, 1, grid).value(512, 0, 0),
        "series": series_solve(r, 1, grid).function.value(512, 0, 0),
    }
    elapsed = time.perf_counter() - start
    errs = {k: abs(v - oracles.P00_AT_1) for k, v in values.items()}
    ok = max(errs.values()) <= 1e-6 and elapsed < 1.0
    detail = ", ".join(f"{k} err {e:.1e}" for k, e in errs.items())
    assert report(1, ok, f"P00(1) {detail}; {elapsed:.2f} s (limit 1e-6, 1 s)")


def test_criterion_2_volterra_consistency(report):
    start = time.perf_counter()
    models = acceptance_models()
    gaps = {}
    for name, steps, tol in (("two_state", 512, 1e-5), ("example1", 256, 1e-4)):
        r, a, w = models[name]
        grid = TimeGrid.uniform(1.0, steps)
        rfun = uniformization_solve(r, w, grid, eps=1e-13)
        direct = uniformization_solve(perturb(r, a), w, grid, eps=1e-13)
        gaps[name] = (float(np.abs(volterra_solve(rfun, a).function.values - direct.values).max()), tol)
    elapsed = time.perf_counter() - start
    ok = all(g <= tol for g, tol in gaps.values()) and elapsed < 30.0
    detail = ", ".join(f"{k} sup gap {g:.1e} (limit {tol:.0e})" for k, (g, tol) in gaps.items())
    assert report(2, ok, f"{detail}; {elapsed:.1f} s (limit 30 s)")


def test_criterion_3_term_decomposition(report):
    models = acceptance_models()
    parts, ok = [], True
    for name in ("two_state", "random20"):
        r, a, w = models[name]
        coarse = term_decomposition_check(r, a, w, TimeGrid.uniform(1.0, 256), 5).max_residual
        fine = term_decomposition_check(r, a, w, TimeGrid.uniform(1.0, 512), 5).max_residual
        ok &= coarse <= 4.0 * fine
        parts.append(f"{name} res(1/256) {coarse:.4e}, 4 res(1/512) {4 * fine:.4e}, "
                     f"ratio {coarse / fine:.5f}")
    assert report(3, ok, "; ".join(parts) + " (need res(h) <= 4 res(h/2))")


def test_criterion_4_regularity_equivalence(report):
    start = time.perf_counter()
    a = zoo.birth_immigration()
    reg = regularity_equivalence_experiment(zoo.yule(), a, [100, 200, 300])
    exp = regularity_equivalence_experiment(zoo.explosive_birth(), a, [100, 200, 400])
    elapsed = time.perf_counter() - start
    reg_ok = all(p.verdict == "regular-likely" and p.defects[-1] < 1e-4
                 for p in (reg.r_probe, reg.q_probe))
    exp_ok = all(p.verdict == "explosive-likely" and min(p.defects) > 5e-2
                 for p in (exp.r_probe, exp.q_probe))
    ok = reg_ok and exp_ok and reg.consistent and exp.consistent and elapsed < 120.0
    detail = (f"Yule R/R+A {reg.r_probe.verdict}/{reg.q_probe.verdict} defect(300) "
              f"{reg.r_probe.defects[-1]:.1e}/{reg.q_probe.defects[-1]:.1e}; "
              f"(i+1)^2 R/R+A {exp.r_probe.verdict}/{exp.q_probe.verdict} defects "
              f"{np.round(exp.r_probe.defects, 3).tolist()}/{np.round(exp.q_probe.defects, 3).tolist()}; "
              f"{elapsed:.1f} s")
    assert report(4, ok, detail)


def test_criterion_5_integration_by_parts_identity(report):
    parts, ok = [], True
    for name, (r, a, w) in acceptance_models().items():
        coarse, fine = ibp.richardson_table(r, a, w, 1.0, (256, 512))
        shrink = fine["shrink"]
        pointwise = fine["max_side_gap"] <= 10.0 * fine["residual"]
        ok &= 3.0 <= shrink <= 5.0 and pointwise
        parts.append(f"{name} shrink {shrink:.4f}, |lhs-rhs| {fine['max_side_gap']:.2e} "
                     f"vs residual {fine['residual']:.2e}")
    assert report(5, ok, "; ".join(parts))


def test_criterion_6_representation(report):
    start = time.perf_counter()
    models = acceptance_models()
    cases = {"two_state Q00(1)": ("two_state", 0, 0, 1.0, 256),
             "example1 Q11(0.5)": ("example1", 1, 1, 0.5, 256)}
    parts, ok = [], True
    for label, (name, i, j, t, steps) in cases.items():
        r, a, w = models[name]
        qfun = uniformization_solve(perturb(r, a), w, TimeGrid.uniform(t, steps), eps=1e-13)
        rep = mc.verify_representation(r, a, i, j, t, qfun, 100_000, seed=2026)
        ok &= rep.passed
        parts.append(f"{label} MC {rep.estimate.mean:.5f} +- {rep.estimate.std_error:.1e} vs "
                     f"{rep.deterministic:.5f} (z {rep.z:.2f})")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120.0
    assert report(6, ok, "; ".join(parts) + f"; {elapsed:.1f} s")


def _plain_q_terms(q, w, grid, n):
    return [t.transpose(1, 0, 2).copy()
            for t in series_terms(q.exit_rates(w), q.offdiag(w), grid, n)]


def test_criterion_7_jump_count_terms(report):
    models = acceptance_models()
    r, a, w = models["two_state"]
    t = 1.0
    batch = mc.sample_paths(r, 0, t, 100_000, seed=77)
    moved = np.diff(batch.indptr) > 1
    same = mc.jump_count_values(batch, a, 0, t, 0)
    other = mc.jump_count_values(batch, a, 1, t, 0)
    a0 = a.inner.diag(0)
    exact = bool(np.all(same[~moved] == math.exp(-a0 * t)) and np.all(same[moved] == 0.0)
                 and np.all(other == 0.0))
    target = math.exp(-(r.diag(0) + a0) * t)
    se = same.std(ddof=1) / math.sqrt(same.size)
    n0_ok = exact and abs(same.mean() - target) <= 3 * se
    parts = [f"n=0 per-path exact {exact}, mean {same.mean():.5f} +- {se:.1e} vs "
             f"{target:.5f}"]
    ok = n0_ok
    for name, i, j in (("two_state", 0, 1), ("example1", 1, 2)):
        r, a, w = models[name]
        grid = TimeGrid.uniform(t, 256)
        q = perturb(r, a)
        qfun = uniformization_solve(q, w, grid, eps=1e-13)
        terms = _plain_q_terms(q, w, grid, 1)
        rep = mc.verify_jump_decomposition(r, a, i, j, t, 1, terms, qfun, 100_000, seed=78)
        ok &= rep.passed
        parts.append(f"n=1 {name} ({i},{j}) MC {rep.estimate.mean:.5f} +- "
                     f"{rep.estimate.std_error:.1e} vs Q^(1) {rep.deterministic:.5f} (z {rep.z:.2f})")
    assert report(7, ok, "; ".join(parts))


def test_criterion_8_holding_times(report):
    cases = [("two_state", zoo.two_state(), 0), ("yule", zoo.yule(), 4),
             ("example1", zoo.example1()[0], 3), ("explosive", zoo.explosive_birth(), 5)]
    parts, ok = [], True
    for k, (name, r, i) in enumerate(cases):
        res = mc.holding_time_test(r, i, 10_000, seed=100 + k)
        ok &= res.pvalue > 1e-3
        parts.append(f"{name} state {i} p {res.pvalue:.3f}")
    assert report(8, ok, "; ".join(parts) + " (need p > 0.001, 1e4 samples)")


def _series_partial_sums_monotone(m, w, grid, n):
    total, ok = None, True
    for term in series_terms(m.exit_rates(w), m.offdiag(w), grid, n):
        ok &= bool(term.min() >= 0.0)
        total = term.copy() if total is None else total + term
    return ok


def test_criterion_9_monotonicity(report):
    grid = TimeGrid.uniform(1.0, 128)
    partial_ok, rows_ok, trunc_ok = True, True, True
    worst_row = 0.0
    for r, a, w in acceptance_models().values():
        for m in (r, perturb(r, a)):
            partial_ok &= _series_partial_sums_monotone(m, w, grid, 30)
            for fn in (uniformization_solve(m, w, grid), ode_solve(m, w, grid),
                       series_solve(m, w, grid).function):
                worst_row = max(worst_row, float(fn.row_sums().max()))
    families = [zoo.yule(), perturb(zoo.yule(), zoo.birth_immigration()), zoo.explosive_birth(),
                perturb(*zoo.example1())]
    worst_drop = 0.0
    for m in families:
        prev = None
        for n in (20, 40, 80):
            cur = uniformization_solve(m, n, grid, eps=1e-13).values
            worst_row = max(worst_row, float(cur.sum(axis=2).max()))
            if prev is not None:
                k = prev.shape[1]
                worst_drop = max(worst_drop, float((prev - cur[:, :k, :k]).max()))
            prev = cur
    trunc_ok = worst_drop <= 1e-12
    rows_ok = worst_row <= 1 + 1e-8
    ok = partial_ok and trunc_ok and rows_ok
    assert report(9, ok, f"series terms nonnegative {partial_ok}; largest truncation drop "
                         f"{worst_drop:.1e}; max row sum {worst_row:.12f}")
