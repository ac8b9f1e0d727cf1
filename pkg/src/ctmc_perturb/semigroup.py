"""Feller minimal transition functions on truncation windows.

Three independent routes compute the same object:

* :func:`series_solve` sums the jump-count series (term ``n`` is the
  probability of being at ``j`` after exactly ``n`` jumps),
* :func:`ode_solve` integrates the backward equation ``P' = QP`` with a
  fixed-step L-stable Radau IIA scheme,
* :func:`uniformization_solve` uses the Poisson-weighted power series of the
  stochasticized matrix.

On a window the truncated generator leaks the mass that would leave the
window, so each route yields the killed (minimal) solution and the row-sum
defect grows with explosion or truncation leakage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.stats import poisson

from .exceptions import ConfigurationError, SolverError
from .qmatrix import RateMatrix, Window, _as_window
from .transition import SeriesTerm, TimeGrid, TransitionFunction

__all__ = [
    "exp_kernel_weights",
    "series_terms",
    "series_solve",
    "SeriesResult",
    "ode_solve",
    "uniformization_solve",
    "honesty_defect",
    "regularity_probe",
    "ProbeResult",
    "solve",
    "METHODS",
]

log = logging.getLogger(__name__)

DEFAULT_STEPS = 512
DEFAULT_TAIL_TOL = 1e-8
THETA_REG = 1e-4
THETA_EXP = 5e-2
PLATEAU_RTOL = 0.1


def exp_kernel_weights(kappa: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weights for ``C(t) = int_0^t exp(-kappa (t - s)) g(s) ds`` on a uniform grid.

    With ``g`` interpolated linearly between grid points the integral obeys
    ``C_m = decay * C_{m-1} + alpha * g_m + beta * g_{m-1}`` exactly in the
    kernel (product trapezoid rule).  For ``kappa = 0`` this is the ordinary
    trapezoid rule.
    """
    x = np.asarray(kappa, dtype=float) * h
    decay = np.exp(-x)
    small = x < 1e-2
    xs = np.where(small, 0.0, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi1 = np.where(small, 0.0, -np.expm1(-xs) / xs)
        b = np.where(small, 0.0, (-np.expm1(-xs) - xs * np.exp(-xs)) / xs**2)
    b_series = 0.5 - x / 3 + x**2 / 8 - x**3 / 30 + x**4 / 144
    a_series = 0.5 - x / 6 + x**2 / 24 - x**3 / 120 + x**4 / 720
    beta = h * np.where(small, b_series, b)
    alpha = h * np.where(small, a_series, phi1 - b)
    return decay, alpha, beta


def _sparse_apply(jump: sp.csr_matrix, term: np.ndarray) -> np.ndarray:
    """``jump @ term[:, m, :]`` for every time slice; term layout ``(n, n_t, n)``."""
    n, n_t, _ = term.shape
    return np.asarray(jump @ term.reshape(n, n_t * n)).reshape(n, n_t, n)


def series_terms(kappa, jump, grid: TimeGrid, n_max: int):
    """Yield the terms of the series ``T_0, T_1, ..., T_{n_max}``.

    ``T_0(t) = diag(exp(-kappa t))`` and
    ``T_{n+1}(t)_{ij} = int_0^t exp(-kappa_i (t-s)) sum_k jump_ik T_n(s)_{kj} ds``.
    ``jump`` must be nonnegative.  Each yielded array has the internal layout
    ``(i, t, j)``.
    """
    kappa = np.asarray(kappa, dtype=float)
    n = kappa.size
    jump = sp.csr_matrix(jump)
    if jump.nnz and jump.data.min() < 0:
        raise ConfigurationError("the jump matrix of the series must be nonnegative")
    t = grid.points
    term = np.zeros((n, grid.size, n))
    idx = np.arange(n)
    term[idx, :, idx] = np.exp(-np.outer(kappa, t))
    yield term
    decay, alpha, beta = (w[:, None] for w in exp_kernel_weights(kappa, grid.h))
    for _ in range(n_max):
        g = _sparse_apply(jump, term)
        new = np.zeros_like(term)
        acc = np.zeros((n, n))
        for m in range(1, grid.size):
            acc = decay * acc + alpha * g[:, m, :] + beta * g[:, m - 1, :]
            new[:, m, :] = acc
        term = new
        yield term


@dataclass
class SeriesResult:
    function: TransitionFunction
    terms: list = field(default_factory=list)
    tail_mass: float = 0.0
    converged: bool = True
    n_terms: int = 0


def series_solve(m: RateMatrix, window, grid: TimeGrid, n_max: int = 200,
                 tail_tol: float = DEFAULT_TAIL_TOL, rows=None, keep_terms: bool = False) -> SeriesResult:
    """Minimal transition function as the partial sum of the jump-count series.

    Term 0 is ``delta_ij exp(-q_i t)``; term ``n+1`` convolves the exit-time
    density against term ``n``.  Summation stops after ``n_max`` terms or once
    the mass of the newest term (max over ``t`` and the requested rows of its
    row sum) drops below ``tail_tol``.  ``tail_mass`` reports that mass; ``converged`` is
    False when ``tail_tol`` was not reached.
    """
    window = _as_window(window)
    window.require_kill()
    if n_max < 0:
        raise ConfigurationError("n_max must be >= 0")
    kappa = m.exit_rates(window)
    jump = m.sparse(window) + sp.diags(kappa)
    jump.eliminate_zeros()
    rows = np.arange(window.size) if rows is None else np.asarray(rows, dtype=np.int64)
    total = None
    terms = []
    tail = np.inf
    n_used = 0
    for n, term in enumerate(series_terms(kappa, jump, grid, n_max)):
        total = term.copy() if total is None else total + term
        if keep_terms:
            terms.append(SeriesTerm(n, term.transpose(1, 0, 2).copy()))
        tail = float(term[rows].sum(axis=2).max())
        n_used = n
        if n >= 1 and tail <= tail_tol:
            break
    converged = tail <= tail_tol
    if not converged:
        log.warning("series not converged: term %d still carries mass %.3e", n_used, tail)
    values = total.transpose(1, 0, 2)
    values = np.ascontiguousarray(values[:, rows, :])
    fn = TransitionFunction(window, grid, values, rows, "series", tail_tol,
                            {"tail_mass": tail, "converged": converged, "n_terms": n_used})
    return SeriesResult(fn, terms, tail, converged, n_used)


# Radau IIA (3 stages, order 5) applied to a linear autonomous system is the
# (2, 3) Pade approximant of exp; L-stable, so stiff rows decay.
_RADAU_NUM = (1.0, 2.0 / 5.0, 1.0 / 20.0)
_RADAU_DEN = (1.0, -3.0 / 5.0, 3.0 / 20.0, -1.0 / 60.0)


def _radau_step_matrix(q: np.ndarray, h: float) -> np.ndarray:
    z = h * q
    eye = np.eye(q.shape[0])
    z2 = z @ z
    num = _RADAU_NUM[0] * eye + _RADAU_NUM[1] * z + _RADAU_NUM[2] * z2
    den = _RADAU_DEN[0] * eye + _RADAU_DEN[1] * z + _RADAU_DEN[2] * z2 + _RADAU_DEN[3] * (z2 @ z)
    return la.solve(den, num)


def _march(step: np.ndarray, start: np.ndarray, n_steps: int, substeps: int = 1) -> np.ndarray:
    # X_{m+1} = X_m S: powers of the step matrix, so equal to the backward recursion S X_m
    out = np.empty((n_steps + 1,) + start.shape)
    out[0] = start
    x = start
    for k in range(n_steps):
        for _ in range(substeps):
            x = x @ step
        out[k + 1] = x
    return out


def ode_solve(m: RateMatrix, window, grid: TimeGrid, rows=None, tol: float = 1e-10,
              check_halving: bool = True) -> TransitionFunction:
    """Integrate ``P' = QP``, ``P(0) = I`` on the killed truncation.

    Fixed step ``grid.h`` with the Radau IIA stability function.  The
    validation pass repeats the integration with step ``h/2``; the finer run
    is returned and the largest gap between the two is stored as
    ``info['halving_gap']``.

    Raises
    ------
    SolverError
        If a row sum exceeds ``1 + 10 * tol`` (step instability).
    """
    window = _as_window(window)
    window.require_kill()
    q = m.dense(window)
    rows = np.arange(window.size) if rows is None else np.asarray(rows, dtype=np.int64)
    start = np.eye(window.size)[rows]
    coarse = _march(_radau_step_matrix(q, grid.h), start, grid.n_steps)
    info = {"method": "radau-iia-5", "h": grid.h}
    values = coarse
    if check_halving:
        values = _march(_radau_step_matrix(q, grid.h / 2), start, grid.n_steps, substeps=2)
        info["halving_gap"] = float(np.abs(values - coarse).max())
    worst = float(values.sum(axis=2).max())
    if worst > 1 + 10 * tol:
        raise SolverError(f"row sum {worst:.12g} exceeds 1 + 10*tol; the step h={grid.h:g} looks "
                          "unstable, try a smaller h")
    info["min_value"] = float(values.min())
    return TransitionFunction(window, grid, values, rows, "ode", tol, info)


def _poisson_series(s: sp.csr_matrix, mu: float, eps: float, max_terms: int) -> np.ndarray:
    """``sum_k Pois(k; mu) S^k`` as a dense matrix, neglecting tail mass ``<= eps``."""
    n = s.shape[0]
    if mu == 0:
        return np.eye(n)
    k_max = int(poisson.isf(eps, mu)) + 1
    if k_max > max_terms:
        raise SolverError(f"uniformization needs {k_max} Poisson terms per step "
                          f"(budget {max_terms}); use a smaller h or a larger budget")
    weights = poisson.pmf(np.arange(k_max + 1), mu)
    x = np.eye(n)
    acc = weights[0] * x
    for w in weights[1:]:
        x = s @ x
        acc += w * x
    return acc


def uniformization_solve(m: RateMatrix, window, grid: TimeGrid, eps: float = 1e-10, rows=None,
                         max_terms: int = 1_000_000) -> TransitionFunction:
    """Killed truncation via uniformization.

    With ``Lambda = max_i q_i`` on the window and ``S = I + Q/Lambda``
    (substochastic), ``exp(hQ) = sum_k Pois(k; Lambda h) S^k``.  Each grid step
    neglects at most ``eps / n_steps`` of Poisson tail, so the values are
    within ``eps`` of the exact killed solution.
    """
    window = _as_window(window)
    window.require_kill()
    q = m.sparse(window)
    rates = -q.diagonal()
    lam = float(rates.max(initial=0.0))
    rows = np.arange(window.size) if rows is None else np.asarray(rows, dtype=np.int64)
    start = np.eye(window.size)[rows]
    if lam == 0.0:
        step = np.eye(window.size)
    else:
        s = sp.identity(window.size, format="csr") + q / lam
        step = _poisson_series(s.tocsr(), lam * grid.h, eps / grid.n_steps, max_terms)
    values = _march(step, start, grid.n_steps)
    info = {"lambda": lam, "terms_per_step": int(poisson.isf(eps / grid.n_steps, lam * grid.h)) + 1
            if lam else 0}
    return TransitionFunction(window, grid, values, rows, "uniform", eps, info)


METHODS = ("series", "ode", "uniform")


def solve(m: RateMatrix, window, grid: TimeGrid, method: str = "uniform", rows=None, **kw) -> TransitionFunction:
    """Dispatch to one of the three solvers by name."""
    if method == "series":
        return series_solve(m, window, grid, rows=rows, **kw).function
    if method == "ode":
        return ode_solve(m, window, grid, rows=rows, **kw)
    if method == "uniform":
        return uniformization_solve(m, window, grid, rows=rows, **kw)
    raise ConfigurationError(f"unknown method {method!r}; choose one of {', '.join(METHODS)}")


def honesty_defect(p: TransitionFunction, t_index: int, i: int) -> float:
    """``1 - sum_j P_ij(t)`` over the window."""
    return float(1.0 - p.values[t_index, p.row_index(i)].sum())


@dataclass
class ProbeResult:
    verdict: str
    schedule: list
    defects: list
    state: int
    T: float
    thresholds: dict

    def as_dict(self) -> dict:
        return {"verdict": self.verdict, "state": self.state, "T": self.T,
                "schedule": list(self.schedule), "defects": list(self.defects),
                "thresholds": dict(self.thresholds)}


def classify_defects(defects, theta_reg: float = THETA_REG, theta_exp: float = THETA_EXP,
                     plateau_rtol: float = PLATEAU_RTOL) -> str:
    """Verdict from a defect trace over an increasing truncation schedule.

    ``regular-likely``: nonincreasing trace ending below ``theta_reg``; rises
    smaller than ``1e-3 * theta_reg`` count as rounding noise.
    ``explosive-likely``: the last two defects exceed ``theta_exp`` and differ
    by at most ``plateau_rtol`` relative.  Anything else is inconclusive.
    """
    d = np.asarray(defects, dtype=float)
    nonincreasing = bool(np.all(np.diff(d) <= 1e-3 * theta_reg))
    if nonincreasing and d[-1] <= theta_reg:
        return "regular-likely"
    if min(d[-1], d[-2]) >= theta_exp and abs(d[-1] - d[-2]) <= plateau_rtol * d[-1]:
        return "explosive-likely"
    return "inconclusive"


def regularity_probe(m: RateMatrix, i: int, T: float, window_schedule, method: str = "uniform",
                     steps: int = DEFAULT_STEPS, theta_reg: float = THETA_REG,
                     theta_exp: float = THETA_EXP, plateau_rtol: float = PLATEAU_RTOL,
                     **solver_kw) -> ProbeResult:
    """Classify ``m`` as regular or explosive from honesty defects of row ``i`` at time ``T``.

    The defect ``1 - sum_j P_ij(T)`` is computed on each window of
    ``window_schedule`` (strictly increasing, at least three entries).
    """
    schedule = [int(n) for n in window_schedule]
    if len(schedule) < 3 or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ConfigurationError("window_schedule must be strictly increasing with at least 3 entries")
    grid = TimeGrid.uniform(T, steps)
    defects = []
    for n in schedule:
        p = solve(m, Window(n), grid, method=method, rows=[i], **solver_kw)
        defects.append(max(honesty_defect(p, grid.n_steps, i), 0.0))
    verdict = classify_defects(defects, theta_reg, theta_exp, plateau_rtol)
    thresholds = {"theta_reg": theta_reg, "theta_exp": theta_exp, "plateau_rtol": plateau_rtol,
                  "method": method, "steps": steps}
    return ProbeResult(verdict, schedule, defects, i, float(T), thresholds)
