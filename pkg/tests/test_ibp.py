import numpy as np
import pytest

from ctmc_perturb import ibp, zoo
from ctmc_perturb.qmatrix import BoundedPerturbation, perturb, zero_matrix
from ctmc_perturb.semigroup import uniformization_solve
from ctmc_perturb.transition import TimeGrid


def _pair(r, a, w, steps=256):
    grid = TimeGrid.uniform(1.0, steps)
    rfun = uniformization_solve(r, w, grid, eps=1e-13)
    qfun = uniformization_solve(perturb(r, a), w, grid, eps=1e-13)
    return rfun, qfun


def test_zero_perturbation_gives_zero(random_pair):
    r, _, w = random_pair
    a = BoundedPerturbation(zero_matrix(19), 0.0)
    rfun, qfun = _pair(r, a, w, 64)
    assert ibp.matrix_identity_residual(rfun, a, qfun).sup < 1e-13
    lhs, rhs = ibp.ibp_sides(rfun, a, qfun)
    assert np.abs(lhs).max() == 0.0
    assert np.abs(rhs).max() < 1e-13


def test_single_entries_match_vectorised(two_state_pair):
    r, a, w = two_state_pair
    rfun, qfun = _pair(r, a, w)
    lhs, rhs = ibp.ibp_sides(rfun, a, qfun)
    for i, j, m in [(0, 1, 256), (1, 0, 100), (0, 0, 3)]:
        assert ibp.ibp_lhs(rfun, a, qfun, i, j, m).value == pytest.approx(lhs[m, i, j], abs=1e-13)
        assert ibp.ibp_rhs(rfun, a, qfun, i, j, m) == pytest.approx(rhs[m, i, j], abs=1e-13)
    assert ibp.ibp_lhs(rfun, a, qfun, 0, 1, 0).value == 0.0


def test_sides_agree_to_second_order(two_state_pair):
    r, a, w = two_state_pair
    gaps = []
    for steps in (64, 128):
        rfun, qfun = _pair(r, a, w, steps)
        lhs, rhs = ibp.ibp_sides(rfun, a, qfun)
        gaps.append(np.abs(lhs - rhs).max() / rfun.grid.h**2)
    # K = gap / h^2 stable under halving
    assert gaps[0] == pytest.approx(gaps[1], rel=0.05)


def test_matrix_residual_is_consistent_with_sides(random_pair):
    r, a, w = random_pair
    rfun, qfun = _pair(r, a, w, 64)
    res = ibp.matrix_identity_residual(rfun, a, qfun)
    lhs, rhs = ibp.ibp_sides(rfun, a, qfun)
    assert res.sup <= np.abs(lhs - rhs).max() + 1e-12
    assert res.per_time[0] == 0.0


def test_tail_flag(example1_small):
    r, a, w = example1_small
    rfun, qfun = _pair(r, a, w, 64)
    val = ibp.ibp_lhs(rfun, a, qfun, 1, 1, 64)
    assert val.converged and val.tail_bound < 1e-8
    leaky_r, leaky_q = _pair(zoo.yule(), zoo.birth_immigration(), 5, 64)
    leaky = ibp.ibp_lhs(leaky_r, zoo.birth_immigration(), leaky_q, 1, 1, 64)
    assert not leaky.converged


def test_richardson_table(two_state_pair):
    r, a, w = two_state_pair
    rows = ibp.richardson_table(r, a, w, 1.0, (64, 128, 256))
    assert [row["steps"] for row in rows] == [64, 128, 256]
    assert all(3.9 < row["shrink"] < 4.1 for row in rows[1:])


def test_residual_table_rows(two_state_pair):
    r, a, w = two_state_pair
    rfun, qfun = _pair(r, a, w, 16)
    rows = ibp.residual_table(rfun, a, qfun, t_indices=[16])
    assert len(rows) == 4
    t, i, j, lhs, rhs, res = rows[1]
    assert (t, i, j) == (1.0, 0, 1)
    assert res == pytest.approx(lhs - rhs)
