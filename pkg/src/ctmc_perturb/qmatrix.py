"""Generator (Q-matrix) types over the state space 0, 1, 2, ...

A :class:`RateMatrix` is stored row by row: ``row(i)`` returns the finite list
of off-diagonal targets and rates, ``diag(i)`` the total exit rate ``q_i``.
Rows may be closed-form functions of ``i`` (branching models) or tables
(finite chains).  Everything numerical happens on a finite :class:`Window`
``0..N`` where the generator is truncated with killing: rates leading out of
the window are lost mass, which is how minimal solutions are approached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigurationError, InvariantError, ModelError

__all__ = [
    "Window",
    "RateMatrix",
    "BoundedPerturbation",
    "ShiftedMatrices",
    "ValidationReport",
    "validate",
    "perturb",
    "shifted",
    "branching_qmatrix",
    "immigration_resurrection",
    "pure_birth",
    "zero_matrix",
    "random_qmatrix",
]

DEFAULT_TOL = 1e-10

RowFn = Callable[[int], "tuple[Sequence[int], Sequence[float]]"]


@dataclass(frozen=True)
class Window:
    """Truncation window ``{0, ..., max_state}``."""

    max_state: int
    policy: str = "kill"

    def __post_init__(self):
        if int(self.max_state) != self.max_state or self.max_state < 1:
            raise ConfigurationError(f"window max_state must be an integer >= 1, got {self.max_state!r}")
        if self.policy not in ("kill", "reflect-forbidden"):
            raise ConfigurationError(f"unknown window policy {self.policy!r}")

    @property
    def size(self) -> int:
        return self.max_state + 1

    def require_kill(self):
        if self.policy != "kill":
            raise ConfigurationError("minimal transition functions need the 'kill' window policy")


def _as_window(window) -> Window:
    if isinstance(window, Window):
        return window
    return Window(int(window))


class RateMatrix:
    """Sparse, row-wise generator of a stable Q-matrix.

    Parameters
    ----------
    row_fn : callable
        ``row_fn(i) -> (targets, rates)`` listing the off-diagonal entries of
        row ``i``.  Entries with ``j == i`` are ignored.
    diag_fn : callable, optional
        ``diag_fn(i) -> q_i``.  Defaults to the row sum (conservative).
    support_bound : int, optional
        Largest state for which rows are defined (finite chains).
    tail_mass : float
        Rate mass discarded when an infinite row was truncated, per unit of
        the row's scale.  Reported by :func:`validate`.
    name : str
        Free-form label used in reports.
    """

    def __init__(self, row_fn: RowFn, diag_fn: Callable[[int], float] | None = None,
                 support_bound: int | None = None, tail_mass: float = 0.0, name: str = ""):
        self._row_fn = row_fn
        self._diag_fn = diag_fn
        self.support_bound = None if support_bound is None else int(support_bound)
        self.tail_mass = float(tail_mass)
        self.name = name

    def __repr__(self):
        label = self.name or "RateMatrix"
        bound = "" if self.support_bound is None else f", support_bound={self.support_bound}"
        return f"<{label}{bound}>"

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i < 0 or (self.support_bound is not None and i > self.support_bound):
            raise IndexError(f"row {i} is undefined (support_bound={self.support_bound})")
        targets, rates = self._row_fn(int(i))
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        rates = np.asarray(rates, dtype=float).reshape(-1)
        if targets.shape != rates.shape:
            raise ModelError(f"row {i}: targets and rates differ in length")
        keep = (targets != i) & (rates != 0.0)
        return targets[keep], rates[keep]

    def diag(self, i: int) -> float:
        """Total exit rate ``q_i = -q_ii``."""
        if self._diag_fn is None:
            return float(self.row(i)[1].sum())
        if i < 0 or (self.support_bound is not None and i > self.support_bound):
            raise IndexError(f"row {i} is undefined (support_bound={self.support_bound})")
        return float(self._diag_fn(int(i)))

    def rate(self, i: int, j: int) -> float:
        if i == j:
            return -self.diag(i)
        targets, rates = self.row(i)
        return float(rates[targets == j].sum())

    def _check_window(self, window: Window):
        if self.support_bound is not None and window.max_state > self.support_bound:
            raise ConfigurationError(
                f"window max_state={window.max_state} exceeds the support bound {self.support_bound} of {self!r}")

    def exit_rates(self, window) -> np.ndarray:
        window = _as_window(window)
        self._check_window(window)
        return np.array([self.diag(i) for i in range(window.size)])

    def triplets(self, window) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Off-diagonal entries with both ends inside the window."""
        window = _as_window(window)
        self._check_window(window)
        rows, cols, vals = [], [], []
        for i in range(window.size):
            targets, rates = self.row(i)
            inside = targets <= window.max_state
            rows.append(np.full(int(inside.sum()), i))
            cols.append(targets[inside])
            vals.append(rates[inside])
        return (np.concatenate(rows).astype(np.int64), np.concatenate(cols).astype(np.int64),
                np.concatenate(vals))

    def sparse(self, window) -> sp.csr_matrix:
        """Killed truncation on the window as a CSR matrix (diagonal ``-q_i``)."""
        window = _as_window(window)
        i, j, v = self.triplets(window)
        n = window.size
        q = self.exit_rates(window)
        i = np.concatenate([i, np.arange(n)])
        j = np.concatenate([j, np.arange(n)])
        v = np.concatenate([v, -q])
        return sp.csr_matrix((v, (i, j)), shape=(n, n))

    def dense(self, window) -> np.ndarray:
        return self.sparse(window).toarray()

    def offdiag(self, window) -> np.ndarray:
        m = self.dense(window)
        np.fill_diagonal(m, 0.0)
        return m

    @classmethod
    def from_dense(cls, matrix, name: str = "") -> "RateMatrix":
        """Finite generator from a square array; the diagonal is taken as given."""
        m = np.array(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ModelError("a dense generator must be a square 2-d array")
        n = m.shape[0]
        cols = np.arange(n)

        def row_fn(i):
            mask = (cols != i) & (m[i] != 0.0)
            return cols[mask], m[i, mask]

        return cls(row_fn, diag_fn=lambda i: -m[i, i], support_bound=n - 1, name=name)

    @classmethod
    def from_triplets(cls, n_states: int, triplets, diag=None, name: str = "") -> "RateMatrix":
        """Finite generator from ``(i, j, rate)`` triplets.

        ``diag`` lists the exit rates ``q_i``; when omitted rows are made
        conservative.
        """
        m = np.zeros((n_states, n_states))
        for i, j, rate in triplets:
            i, j = int(i), int(j)
            if not (0 <= i < n_states and 0 <= j < n_states):
                raise ModelError(f"triplet ({i}, {j}) outside the {n_states}-state space")
            if i == j:
                raise ModelError(f"triplet ({i}, {j}) is diagonal; give exit rates through 'diag'")
            m[i, j] += float(rate)
        if diag is None:
            np.fill_diagonal(m, -m.sum(axis=1))
        else:
            d = np.asarray(diag, dtype=float)
            if d.shape != (n_states,):
                raise ModelError(f"diag must have {n_states} entries, got {d.shape}")
            np.fill_diagonal(m, -d)
        return cls.from_dense(m, name=name)


@dataclass(frozen=True)
class BoundedPerturbation:
    """A Q-matrix ``A`` together with its uniform rate bound ``gamma = sup_i a_i``."""

    inner: RateMatrix
    gamma: float

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ModelError(f"gamma must be finite and nonnegative, got {self.gamma}")

    @classmethod
    def from_rate_matrix(cls, a: RateMatrix, window) -> "BoundedPerturbation":
        """Wrap ``a`` with ``gamma`` taken as the largest exit rate on ``window``."""
        rates = a.exit_rates(window)
        return cls(a, float(rates.max(initial=0.0)))

    def killing_rates(self, window) -> np.ndarray:
        """``a_i = -a_ii`` on the window, checked against ``gamma``."""
        a = self.inner.exit_rates(window)
        if np.any(a > self.gamma * (1 + 1e-12) + 1e-300):
            worst = int(np.argmax(a))
            raise InvariantError(f"a_{worst} = {a[worst]} exceeds gamma = {self.gamma}")
        return a


@dataclass(frozen=True)
class ShiftedMatrices:
    """Nonnegative matrices ``q'`` and ``a'`` on a window.

    ``q'`` equals ``Q`` off the diagonal with ``q'_ii = gamma - a_i``;
    ``a' = A + gamma I``.
    """

    qprime: np.ndarray
    aprime: np.ndarray
    gamma: float


@dataclass
class ValidationReport:
    """Per-row outcome of :func:`validate`.

    ``residuals[i]`` is ``|q_i - sum_{j != i} q_ij|`` (``inf`` for undefined
    rows) and ``scale[i]`` the magnitude the tolerance is relative to.
    """

    window: Window
    tol: float
    residuals: np.ndarray
    scale: np.ndarray
    negative_entries: list = field(default_factory=list)
    undefined_rows: list = field(default_factory=list)
    tail_mass: float = 0.0

    def failing_rows(self) -> np.ndarray:
        return np.flatnonzero(self.residuals > self.tol * np.maximum(1.0, self.scale))

    @property
    def passed(self) -> bool:
        return not self.negative_entries and not self.undefined_rows and self.failing_rows().size == 0

    @property
    def max_residual(self) -> float:
        finite = self.residuals[np.isfinite(self.residuals)]
        return float(finite.max(initial=0.0))

    def summary(self) -> str:
        lines = [f"window 0..{self.window.max_state}  tol {self.tol:g}  "
                 f"{'PASS' if self.passed else 'FAIL'}",
                 f"max conservativeness residual {self.max_residual:.3e}"]
        for i in self.failing_rows()[:20]:
            lines.append(f"  row {i}: residual {self.residuals[i]:.6g}")
        for i, j, r in self.negative_entries[:20]:
            lines.append(f"  negative rate at ({i}, {j}): {r:g}")
        for i in self.undefined_rows[:20]:
            lines.append(f"  undefined row {i}")
        if self.tail_mass:
            lines.append(f"truncated tail mass {self.tail_mass:.3e}")
        return "\n".join(lines)


def validate(m: RateMatrix, window, tol: float = DEFAULT_TOL) -> ValidationReport:
    """Check stability, sign structure and conservativeness row by row.

    The residual of row ``i`` is ``|q_i - sum_{j != i} q_ij|`` over the full
    row, including targets outside the window.  A row passes when its residual
    is at most ``tol * max(1, q_i)``.
    """
    window = _as_window(window)
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    residuals = np.full(window.size, np.nan)
    scale = np.ones(window.size)
    negative, undefined = [], []
    for i in range(window.size):
        try:
            targets, rates = m.row(i)
            qi = m.diag(i)
        except (IndexError, KeyError):
            undefined.append(i)
            residuals[i] = np.inf
            continue
        for j, r in zip(targets[rates < 0], rates[rates < 0]):
            negative.append((i, int(j), float(r)))
        if not np.isfinite(qi) or qi < 0:
            negative.append((i, i, -float(qi)))
        residuals[i] = abs(qi - rates.sum())
        scale[i] = abs(qi)
    return ValidationReport(window, tol, residuals, scale, negative, undefined, m.tail_mass)


def perturb(r: RateMatrix, a, window=None, tol: float = DEFAULT_TOL) -> RateMatrix:
    """Return ``Q = R + A``.

    ``a`` may be a :class:`BoundedPerturbation` or a bare :class:`RateMatrix`.
    When ``window`` is given both inputs are validated on it first.
    """
    inner = a.inner if isinstance(a, BoundedPerturbation) else a
    if (r.support_bound is not None and inner.support_bound is not None
            and r.support_bound != inner.support_bound):
        raise ConfigurationError(
            f"support bounds differ: R has {r.support_bound}, A has {inner.support_bound}")
    if window is not None:
        for label, m in (("R", r), ("A", inner)):
            rep = validate(m, window, tol)
            if not rep.passed:
                raise ModelError(f"{label} fails validation:\n{rep.summary()}")
    bound = r.support_bound if r.support_bound is not None else inner.support_bound

    def row_fn(i):
        t1, r1 = r.row(i)
        t2, r2 = inner.row(i)
        targets = np.concatenate([t1, t2])
        rates = np.concatenate([r1, r2])
        uniq, inv = np.unique(targets, return_inverse=True)
        return uniq, np.bincount(inv, weights=rates, minlength=uniq.size)

    def diag_fn(i):
        return r.diag(i) + inner.diag(i)

    name = f"{r.name or 'R'}+{inner.name or 'A'}"
    return RateMatrix(row_fn, diag_fn, support_bound=bound,
                      tail_mass=r.tail_mass + inner.tail_mass, name=name)


def shifted(q: RateMatrix, a: BoundedPerturbation, r: RateMatrix, window,
            atol: float = 1e-12) -> ShiftedMatrices:
    """Build ``q'`` and ``a'`` on the window and check their consistency."""
    window = _as_window(window)
    gamma = a.gamma
    a_dense = a.inner.dense(window)
    a_rates = -np.diag(a_dense)
    if np.any(a_rates > gamma + atol * max(1.0, gamma)):
        worst = int(np.argmax(a_rates))
        raise InvariantError(f"a_{worst} = {a_rates[worst]} exceeds gamma = {gamma}")
    qprime = q.offdiag(window)
    np.fill_diagonal(qprime, np.maximum(gamma - a_rates, 0.0))
    aprime = a_dense + gamma * np.eye(window.size)
    np.fill_diagonal(aprime, np.maximum(np.diag(aprime), 0.0))
    if np.any(qprime < 0) or np.any(aprime < 0):
        raise InvariantError("shifted matrices have negative entries")
    r_off = r.offdiag(window)
    gap = np.abs(qprime - aprime - r_off).max(initial=0.0)
    if gap > atol * max(1.0, np.abs(qprime).max(initial=0.0)):
        raise InvariantError(f"q' != a' + offdiag(R) (max gap {gap:.3e}); is Q = R + A?")
    return ShiftedMatrices(qprime, aprime, gamma)


def _check_offspring(arr, special: int, label: str, tol: float = 1e-10) -> np.ndarray:
    arr = np.asarray(arr, dtype=float).reshape(-1)
    if arr.size <= special:
        arr = np.concatenate([arr, np.zeros(special + 1 - arr.size)])
    others = np.delete(arr, special)
    if np.any(others < 0):
        raise ModelError(f"{label}: entries other than index {special} must be >= 0")
    if abs(others.sum() + arr[special]) > tol * max(1.0, abs(arr[special])):
        raise ModelError(f"{label}: entries off index {special} must sum to -{label}[{special}] "
                         f"(got {others.sum()} vs {-arr[special]})")
    return arr


def branching_qmatrix(b, max_offspring: int | None = None) -> RateMatrix:
    """Branching generator ``r_ij = i * b_{j-i+1}`` for ``j >= i-1``, ``i >= 1``.

    State 0 is absorbing.  ``b`` must satisfy ``b_j >= 0`` for ``j != 1`` and
    ``sum_{j != 1} b_j = -b_1``.  With ``max_offspring`` the offspring law is
    cut to jumps of size at most ``max_offspring - 1``; the dropped mass goes
    to ``tail_mass`` and the exit rate is reduced so rows stay conservative.
    """
    b = _check_offspring(b, 1, "b")
    tail = 0.0
    if max_offspring is not None and max_offspring + 1 < b.size:
        tail = float(b[max_offspring + 1:].sum())
        b = b[:max_offspring + 1].copy()
        b[1] = -np.delete(b, 1).sum()
    steps = np.arange(b.size) - 1
    keep = (steps != 0) & (b != 0)
    steps, rates = steps[keep], b[keep]
    birth_death = -b[1]

    def row_fn(i):
        if i == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        return i + steps, i * rates

    return RateMatrix(row_fn, diag_fn=lambda i: i * birth_death, tail_mass=tail, name="branching")


def immigration_resurrection(c, h) -> BoundedPerturbation:
    """Immigration (``c``) and resurrection (``h``) perturbation.

    Row 0 is ``a_0j = h_j``.  For ``i >= 1`` the row is ``a_ij = c_{j-i}``
    for ``j >= i``, so the diagonal is ``c_0``.  ``gamma = max(-h_0, -c_0)``.
    """
    c = _check_offspring(c, 0, "c")
    h = _check_offspring(h, 0, "h")
    c_steps = np.flatnonzero(c[1:] != 0) + 1
    c_rates = c[c_steps]
    h_targets = np.flatnonzero(h[1:] != 0) + 1
    h_rates = h[h_targets]

    def row_fn(i):
        if i == 0:
            return h_targets, h_rates
        return i + c_steps, c_rates

    def diag_fn(i):
        return -h[0] if i == 0 else -c[0]

    inner = RateMatrix(row_fn, diag_fn, name="immigration_resurrection")
    return BoundedPerturbation(inner, float(max(-h[0], -c[0], 0.0)))


def pure_birth(coef: float = 1.0, offset: float = 0.0, power: float = 1.0) -> RateMatrix:
    """Pure birth chain ``i -> i+1`` at rate ``coef * (i + offset) ** power``.

    ``(1, 0, 1)`` is the Yule process; ``(1, 1, 2)`` is the classical explosive
    chain with rates ``(i+1)^2``.
    """
    if coef < 0 or offset < 0:
        raise ModelError("pure birth needs coef >= 0 and offset >= 0")

    def rate(i):
        return coef * float(i + offset) ** power

    def row_fn(i):
        lam = rate(i)
        if lam == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        return np.array([i + 1]), np.array([lam])

    return RateMatrix(row_fn, diag_fn=rate, name=f"pure_birth({coef}, {offset}, {power})")


def zero_matrix(support_bound: int | None = None) -> RateMatrix:
    return RateMatrix(lambda i: (np.empty(0, dtype=np.int64), np.empty(0)),
                      diag_fn=lambda i: 0.0, support_bound=support_bound, name="zero")


def random_qmatrix(n_states: int, seed: int, density: float = 0.5, scale: float = 1.0) -> RateMatrix:
    """Random conservative finite generator (``numpy`` Generator seeded by ``seed``)."""
    rng = np.random.default_rng(seed)
    m = rng.uniform(0.0, scale, size=(n_states, n_states))
    m *= rng.uniform(size=(n_states, n_states)) < density
    np.fill_diagonal(m, 0.0)
    np.fill_diagonal(m, -m.sum(axis=1))
    return RateMatrix.from_dense(m, name=f"random({n_states}, seed={seed})")
