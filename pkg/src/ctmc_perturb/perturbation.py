"""Bounded perturbations ``Q = R + A``: Volterra solver and regularity experiments.

With ``gamma = sup_i a_i`` and ``a' = A + gamma I >= 0`` the minimal
transition function of ``Q`` solves

    Q(t) = exp(-gamma t) R(t) + int_0^t exp(-gamma (t-s)) R(t-s) a' Q(s) ds,

which is solved here by Picard iteration with trapezoid convolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .qmatrix import BoundedPerturbation, RateMatrix, Window, _as_window, perturb, shifted
from .quadrature import MatrixConvolver
from .semigroup import regularity_probe, series_terms
from .transition import TimeGrid, TransitionFunction

__all__ = [
    "VolterraResult",
    "volterra_solve",
    "honesty_fixed_point_check",
    "FixedPointReport",
    "term_decomposition_check",
    "DecompositionReport",
    "regularity_equivalence_experiment",
    "EquivalenceResult",
]


def _aprime(a: BoundedPerturbation, window: Window) -> np.ndarray:
    dense = a.inner.dense(window)
    a.killing_rates(window)
    return dense + a.gamma * np.eye(window.size)


def _kernel(rvals: np.ndarray, aprime: np.ndarray, gamma: float, grid: TimeGrid) -> np.ndarray:
    decay = np.exp(-gamma * grid.points)
    return decay[:, None, None] * (rvals @ aprime)


@dataclass
class VolterraResult:
    function: TransitionFunction
    converged: bool
    iterations: int
    gaps: list = field(default_factory=list)

    @property
    def residual(self) -> float:
        return self.gaps[-1] if self.gaps else 0.0


def volterra_solve(rfun: TransitionFunction, a: BoundedPerturbation, iter_max: int | None = None,
                   tol: float = 1e-12, initial: str = "free") -> VolterraResult:
    """Minimal transition function of ``R + A`` from that of ``R``.

    Parameters
    ----------
    rfun : TransitionFunction
        ``R(t)`` on a window and grid; all rows are required.
    a : BoundedPerturbation
    iter_max : int, optional
        Picard sweeps; defaults to ``ceil(gamma T) + 40``.  After ``m`` sweeps
        the error is at most ``(gamma T)^m / m!`` times the initial gap.
    tol : float
        Stop once successive iterates differ by at most ``tol`` in sup norm.
    initial : {"free", "zero"}
        Start from ``exp(-gamma t) R(t)`` or from zero.
    """
    grid, window = rfun.grid, rfun.window
    rvals = rfun.matrices()
    gamma = a.gamma
    if iter_max is None:
        iter_max = math.ceil(gamma * grid.T) + 40
    free = np.exp(-gamma * grid.points)[:, None, None] * rvals
    conv = MatrixConvolver(_kernel(rvals, _aprime(a, window), gamma, grid), grid.h)
    q = free.copy() if initial == "free" else np.zeros_like(free)
    gaps = []
    converged = False
    it = 0
    for it in range(1, iter_max + 1):
        if gamma == 0.0:
            new = free.copy()
        else:
            new = free + conv.apply(q)
        gaps.append(float(np.abs(new - q).max()))
        q = new
        if gaps[-1] <= tol:
            converged = True
            break
    info = {"gamma": gamma, "iterations": it, "gaps": gaps, "converged": converged}
    fn = TransitionFunction(window, grid, q, None, "volterra", tol, info)
    return VolterraResult(fn, converged, it, gaps)


@dataclass
class FixedPointReport:
    """Both sides of the row-sum equation ``x = K * x + exp(-gamma t) sum_j R_ij``."""

    residual: float
    x_min: float
    r_defect: float
    r_honest: bool
    ones_residual: float | None
    ones_bound: float | None
    tol: float

    @property
    def passed(self) -> bool:
        ok = self.residual <= self.tol
        if self.ones_residual is not None:
            ok = ok and self.ones_residual <= self.ones_bound
        return ok

    def as_dict(self) -> dict:
        return {"residual": self.residual, "x_min": self.x_min, "r_defect": self.r_defect,
                "r_honest": self.r_honest, "ones_residual": self.ones_residual,
                "ones_bound": self.ones_bound, "tol": self.tol, "passed": self.passed}


def honesty_fixed_point_check(rfun: TransitionFunction, a: BoundedPerturbation,
                              qfun: TransitionFunction | None = None, tol: float = 1e-8,
                              honest_tol: float = 1e-8) -> FixedPointReport:
    """Check that ``x_i(t) = sum_j Q_ij(t)`` solves the summed Volterra equation.

    The residual is ``max |x - rhs(x)|`` over the grid.  When ``R`` is honest
    on the window (row-sum defect at most ``honest_tol``) the constant
    ``x = 1`` is also plugged in; its residual is pure quadrature error and is
    compared with ``gamma^3 T h^2 / 12`` plus twice the defect.
    """
    grid, window = rfun.grid, rfun.window
    if qfun is None:
        qfun = volterra_solve(rfun, a).function
    rvals = rfun.matrices()
    gamma = a.gamma
    conv = MatrixConvolver(_kernel(rvals, _aprime(a, window), gamma, grid), grid.h)
    decay = np.exp(-gamma * grid.points)[:, None]
    rsum = rvals.sum(axis=2)
    x = qfun.matrices().sum(axis=2)
    rhs = conv.apply(x[:, :, None])[:, :, 0] + decay * rsum
    residual = float(np.abs(x - rhs).max())
    r_defect = float((1.0 - rsum).max())
    honest = r_defect <= honest_tol
    ones_residual = ones_bound = None
    if honest:
        ones = np.ones_like(x)
        rhs1 = conv.apply(ones[:, :, None])[:, :, 0] + decay * rsum
        ones_residual = float(np.abs(1.0 - rhs1).max())
        ones_bound = gamma**3 * grid.T * grid.h**2 / 12 + 2 * max(r_defect, 0.0) + 1e-12
    return FixedPointReport(residual, float(x.min()), r_defect, honest, ones_residual, ones_bound, tol)


@dataclass
class DecompositionReport:
    residuals: list
    h: float

    @property
    def max_residual(self) -> float:
        return max(self.residuals)

    def as_dict(self) -> dict:
        return {"h": self.h, "residuals": list(self.residuals), "max_residual": self.max_residual}


def term_decomposition_check(r: RateMatrix, a: BoundedPerturbation, window, grid: TimeGrid,
                             n_max: int = 5) -> DecompositionReport:
    """Compare the shifted-series terms of ``Q`` with their decomposition over ``R``-terms.

    ``Q^(n)`` comes from the series with kernel rate ``r_i + gamma`` and jump
    matrix ``q'``; the right side is
    ``sum_{p<n} int exp(-gamma u) R^(n-p-1)(u) a' Q^(p)(t-u) du + exp(-gamma t) R^(n)(t)``
    with ``R^(n)`` from the plain series of ``R``.  Returns the sup-norm
    residual for each ``n <= n_max``.
    """
    window = _as_window(window)
    q = perturb(r, a)
    sh = shifted(q, a, r, window)
    gamma = a.gamma
    r_rates = r.exit_rates(window)
    r_terms = [t.transpose(1, 0, 2).copy()
               for t in series_terms(r_rates, r.offdiag(window), grid, n_max)]
    q_terms = [t.transpose(1, 0, 2).copy()
               for t in series_terms(r_rates + gamma, sh.qprime, grid, n_max)]
    decay = np.exp(-gamma * grid.points)[:, None, None]
    convs = [MatrixConvolver(decay * (rt @ sh.aprime), grid.h) for rt in r_terms]
    residuals = []
    for n in range(n_max + 1):
        rhs = decay * r_terms[n]
        for p in range(n):
            rhs = rhs + convs[n - p - 1].apply(q_terms[p])
        residuals.append(float(np.abs(q_terms[n] - rhs).max()))
    return DecompositionReport(residuals, grid.h)


@dataclass
class EquivalenceResult:
    r_probe: object
    q_probe: object

    @property
    def decisive(self) -> bool:
        return "inconclusive" not in (self.r_probe.verdict, self.q_probe.verdict)

    @property
    def consistent(self) -> bool:
        return not self.decisive or self.r_probe.verdict == self.q_probe.verdict

    @property
    def finding(self) -> str | None:
        if self.consistent:
            return None
        return (f"decisive verdicts disagree: R is {self.r_probe.verdict}, "
                f"R+A is {self.q_probe.verdict}")

    def as_dict(self) -> dict:
        return {"R": self.r_probe.as_dict(), "Q": self.q_probe.as_dict(),
                "consistent": self.consistent, "finding": self.finding}


def regularity_equivalence_experiment(r: RateMatrix, a: BoundedPerturbation, schedule, i: int = 1,
                                      T: float = 1.0, **probe_kw) -> EquivalenceResult:
    """Probe ``R`` and ``R + A`` over the same truncation schedule and compare verdicts."""
    rp = regularity_probe(r, i, T, schedule, **probe_kw)
    qp = regularity_probe(perturb(r, a), i, T, schedule, **probe_kw)
    return EquivalenceResult(rp, qp)
