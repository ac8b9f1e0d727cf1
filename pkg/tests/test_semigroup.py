import math

import numpy as np
import pytest

import oracles
from ctmc_perturb import zoo
from ctmc_perturb.exceptions import ConfigurationError, SolverError
from ctmc_perturb.qmatrix import RateMatrix, Window, pure_birth, random_qmatrix, zero_matrix
from ctmc_perturb.semigroup import (classify_defects, exp_kernel_weights, honesty_defect,
                                    ode_solve, regularity_probe, series_solve, series_terms, solve,
                                    uniformization_solve)
from ctmc_perturb.transition import TimeGrid

GRID = TimeGrid.uniform(1.0, 512)


@pytest.mark.parametrize("method", ["series", "ode", "uniform"])
def test_two_state_oracle(method):
    p = solve(zoo.two_state(), 1, GRID, method=method)
    exact = oracles.two_state_p(1.0)
    assert np.abs(p.values[-1] - exact).max() < 1e-6
    assert p.value(512, 0, 0) == pytest.approx(oracles.FROZEN["P00_AT_1"], abs=1e-6)


@pytest.mark.parametrize("method", ["series", "ode", "uniform"])
def test_random_chain_matches_expm(method):
    r = random_qmatrix(6, 11)
    grid = TimeGrid.uniform(1.0, 256)
    p = solve(r, 5, grid, method=method)
    ref = oracles.expm_path(r.dense(5), grid.points[::64])
    assert np.abs(p.values[::64] - ref).max() < 5e-6


def test_ode_and_uniform_agree_tightly():
    r = random_qmatrix(10, 5)
    a = ode_solve(r, 9, GRID)
    b = uniformization_solve(r, 9, GRID, eps=1e-13)
    assert np.abs(a.values - b.values).max() < 1e-11
    assert a.info["halving_gap"] < 1e-9


def test_series_term_zero_only():
    res = series_solve(zoo.two_state(), 1, GRID, n_max=0)
    expected = np.exp(-GRID.points)
    assert np.allclose(res.function.values[:, 0, 0], expected)
    assert np.all(res.function.values[:, 0, 1] == 0)
    assert not res.converged


def test_series_first_term_against_brute_force():
    r = random_qmatrix(4, 2)
    grid = TimeGrid.uniform(0.7, 256)
    w = Window(3)
    terms = [t.transpose(1, 0, 2) for t in series_terms(r.exit_rates(w), r.offdiag(w), grid, 1)]
    ref = oracles.brute_series_term1(r.dense(w), 0.7)
    assert np.abs(terms[1][-1] - ref).max() < 1e-6


def test_exp_kernel_weights_limits():
    decay, alpha, beta = exp_kernel_weights(np.array([0.0, 1e-5, 1e-2, 3.0]), 0.1)
    assert alpha[0] == pytest.approx(0.05) and beta[0] == pytest.approx(0.05)
    # exact for g = 1: C_1 = (1 - exp(-kappa h)) / kappa
    for k, kappa in enumerate([1e-5, 1e-2, 3.0]):
        assert alpha[k + 1] + beta[k + 1] == pytest.approx(-math.expm1(-kappa * 0.1) / kappa, rel=1e-12)
    assert np.allclose(decay, np.exp(-np.array([0.0, 1e-5, 1e-2, 3.0]) * 0.1))


def test_zero_generator_is_identity():
    p = uniformization_solve(zero_matrix(3), 3, GRID)
    assert np.all(p.values == np.eye(4))


def test_pure_birth_row_against_dense_expm():
    pb = pure_birth(1.0, 1.0, 1.0)
    grid = TimeGrid.uniform(1.0, 128)
    p = ode_solve(pb, 40, grid, rows=[0])
    ref = oracles.pure_birth_defect_free(lambda i: i + 1.0, 41, 1.0)
    assert np.abs(p.values[-1, 0] - ref).max() < 1e-8


def test_yule_honest_at_large_window():
    p = uniformization_solve(zoo.yule(), 100, GRID, rows=[1])
    assert honesty_defect(p, 512, 1) < 1e-10


def test_explosive_defect_oracle():
    p = uniformization_solve(zoo.explosive_birth(), 400, GRID, rows=[0])
    assert p.row_sums()[-1, 0] < 0.9
    assert 0.29 < honesty_defect(p, 512, 0) < 0.31


def test_explosive_ode_is_stable():
    p = ode_solve(zoo.explosive_birth(), 200, GRID, rows=[0])
    assert p.values.min() > -1e-12
    assert p.row_sums().max() <= 1 + 1e-9


def test_ode_flags_instability():
    # a generator with a positive diagonal grows; the guard must fire
    bad = RateMatrix.from_dense([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(SolverError):
        ode_solve(bad, 1, GRID)


def test_uniformization_budget():
    with pytest.raises(SolverError):
        uniformization_solve(zoo.explosive_birth(), 100, TimeGrid.uniform(1.0, 4), max_terms=50)


def test_unknown_method():
    with pytest.raises(ConfigurationError):
        solve(zoo.two_state(), 1, GRID, method="rk4")


def test_classify_defects():
    assert classify_defects([1e-6, 1e-7, 1e-8]) == "regular-likely"
    assert classify_defects([0.31, 0.305, 0.302]) == "explosive-likely"
    assert classify_defects([0.3, 0.2, 0.1]) == "inconclusive"
    assert classify_defects([1e-3, 1e-3, 1e-3]) == "inconclusive"
    # rounding-level rises do not break monotonicity
    assert classify_defects([1e-13, 3e-13, 2e-12]) == "regular-likely"


def test_regularity_probe_verdicts():
    reg = regularity_probe(zoo.yule(), 1, 1.0, [50, 100, 150])
    assert reg.verdict == "regular-likely"
    exp = regularity_probe(zoo.explosive_birth(), 1, 1.0, [100, 200, 400])
    assert exp.verdict == "explosive-likely"
    assert exp.as_dict()["thresholds"]["theta_exp"] == 5e-2


def test_regularity_probe_needs_schedule():
    with pytest.raises(ConfigurationError):
        regularity_probe(zoo.yule(), 1, 1.0, [100, 50, 200])
    with pytest.raises(ConfigurationError):
        regularity_probe(zoo.yule(), 1, 1.0, [100, 200])


def test_subset_rows_match_full():
    r = random_qmatrix(7, 4)
    full = uniformization_solve(r, 6, GRID)
    part = uniformization_solve(r, 6, GRID, rows=[2, 5])
    assert np.allclose(part.values, full.values[:, [2, 5], :])
    with pytest.raises(ConfigurationError):
        part.matrices()
