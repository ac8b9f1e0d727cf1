"""Integration-by-parts identity between the minimal semigroups of ``R`` and ``Q = R + A``.

Entrywise::

    sum_k int_0^t R_ik(s) a_k Q_kj(t-s) ds
        = sum_{l, m != l} int_0^t R_il(t-v) a_lm Q_mj(v) dv + R_ij(t) - Q_ij(t)

and, when the left side is finite (always on a window),
``Q(t) - R(t) = int_0^t R(s) A Q(t-s) ds``.  Both sides use the trapezoid
rule on the shared grid so quadrature bias mostly cancels in residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qmatrix import BoundedPerturbation, RateMatrix, perturb
from .quadrature import MatrixConvolver, trapezoid
from .semigroup import uniformization_solve
from .transition import TimeGrid, TransitionFunction

__all__ = [
    "IbpValue",
    "ibp_lhs",
    "ibp_rhs",
    "ibp_sides",
    "matrix_identity_residual",
    "IdentityResidual",
    "residual_table",
    "richardson_table",
]


def _check_pair(rfun: TransitionFunction, qfun: TransitionFunction):
    if rfun.window != qfun.window or rfun.grid != qfun.grid:
        raise ValueError("R(t) and Q(t) must share window and grid")


@dataclass
class IbpValue:
    value: float
    tail_bound: float
    converged: bool


def ibp_lhs(rfun: TransitionFunction, a: BoundedPerturbation, qfun: TransitionFunction,
            i: int, j: int, t_index: int, tail_tol: float = 1e-8) -> IbpValue:
    """``sum_k int_0^t R_ik(s) a_k Q_kj(t-s) ds`` with ``k`` over the window.

    ``tail_bound`` bounds what states beyond the window could add:
    ``gamma * int_0^t (1 - sum_k R_ik(s)) ds``.
    """
    _check_pair(rfun, qfun)
    h = rfun.grid.h
    if t_index == 0:
        return IbpValue(0.0, 0.0, True)
    kill = a.killing_rates(rfun.window)
    r_row = rfun.values[:t_index + 1, rfun.row_index(i), :]
    q_col = qfun.matrices()[t_index::-1, :, j]
    value = float(trapezoid((r_row * kill * q_col).sum(axis=1), h))
    tail = a.gamma * float(trapezoid(np.clip(1.0 - r_row.sum(axis=1), 0.0, None), h))
    return IbpValue(value, tail, tail <= tail_tol)


def ibp_rhs(rfun: TransitionFunction, a: BoundedPerturbation, qfun: TransitionFunction,
            i: int, j: int, t_index: int) -> float:
    """Off-diagonal double-sum convolution plus ``R_ij(t) - Q_ij(t)``."""
    _check_pair(rfun, qfun)
    r_now = rfun.value(t_index, i, j)
    q_now = qfun.value(t_index, i, j)
    if t_index == 0:
        return r_now - q_now
    off = a.inner.offdiag(rfun.window)
    r_row = rfun.values[t_index::-1, rfun.row_index(i), :]
    q_col = qfun.matrices()[:t_index + 1, :, j]
    integrand = np.einsum("vl,lm,vm->v", r_row, off, q_col)
    return float(trapezoid(integrand, rfun.grid.h)) + r_now - q_now


def ibp_sides(rfun: TransitionFunction, a: BoundedPerturbation, qfun: TransitionFunction):
    """Both sides of the entrywise identity for every ``(t, i, j)`` at once."""
    _check_pair(rfun, qfun)
    window, h = rfun.window, rfun.grid.h
    r, q = rfun.matrices(), qfun.matrices()
    kill = a.killing_rates(window)
    off = a.inner.offdiag(window)
    lhs = MatrixConvolver(r * kill[None, None, :], h).apply(q)
    rhs = MatrixConvolver(r @ off, h).apply(q) + r - q
    return lhs, rhs


@dataclass
class IdentityResidual:
    sup: float
    per_time: np.ndarray
    h: float


def matrix_identity_residual(rfun: TransitionFunction, a: BoundedPerturbation,
                             qfun: TransitionFunction) -> IdentityResidual:
    """Sup norm of ``Q(t) - R(t) - int_0^t R(s) A Q(t-s) ds`` over ``(t, i, j)``."""
    _check_pair(rfun, qfun)
    r, q = rfun.matrices(), qfun.matrices()
    a_dense = a.inner.dense(rfun.window)
    conv = MatrixConvolver(r @ a_dense, rfun.grid.h).apply(q)
    gap = np.abs(q - r - conv)
    per_time = gap.max(axis=(1, 2))
    return IdentityResidual(float(per_time.max()), per_time, rfun.grid.h)


def residual_table(rfun, a, qfun, pairs=None, t_indices=None) -> list[tuple]:
    """Rows ``(t, i, j, lhs, rhs, residual)`` for the CSV residual report."""
    lhs, rhs = ibp_sides(rfun, a, qfun)
    n = rfun.window.size
    pairs = [(i, j) for i in range(n) for j in range(n)] if pairs is None else pairs
    t_indices = range(rfun.grid.size) if t_indices is None else t_indices
    pts = rfun.grid.points
    out = []
    for m in t_indices:
        for i, j in pairs:
            out.append((float(pts[m]), int(i), int(j), float(lhs[m, i, j]), float(rhs[m, i, j]),
                        float(lhs[m, i, j] - rhs[m, i, j])))
    return out


def richardson_table(r: RateMatrix, a: BoundedPerturbation, window, T: float, steps=(256, 512),
                     eps: float = 1e-13) -> list[dict]:
    """Identity residual for a sequence of grids, with successive shrink factors.

    ``R(t)`` and ``Q(t)`` come from uniformization (error ``eps``) so the
    residual isolates the quadrature error of the convolution.
    """
    q = perturb(r, a)
    rows = []
    for n in steps:
        grid = TimeGrid.uniform(T, n)
        rfun = uniformization_solve(r, window, grid, eps=eps)
        qfun = uniformization_solve(q, window, grid, eps=eps)
        res = matrix_identity_residual(rfun, a, qfun)
        lhs, rhs = ibp_sides(rfun, a, qfun)
        rows.append({"steps": n, "h": grid.h, "residual": res.sup,
                     "max_side_gap": float(np.abs(lhs - rhs).max())})
    for prev, cur in zip(rows, rows[1:]):
        cur["shrink"] = prev["residual"] / cur["residual"] if cur["residual"] > 0 else float("inf")
    return rows
