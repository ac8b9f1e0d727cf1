"""Monte Carlo checks of the Feynman-Kac representation of ``Q = R + A``.

Paths of the minimal ``R``-chain are simulated jump by jump.  Every random
draw is a counter-based hash of ``(seed, path index, jump count, stream)``, so
path ``k`` is the same whatever the batch size, chunking or thread count.
Along a path the multiplicative functional is
``M(t) = exp(-int_0^t a(xi_u) du)`` with ``a_i = -A_ii``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .exceptions import ConfigurationError
from .qmatrix import BoundedPerturbation, RateMatrix, Window
from .transition import TransitionFunction

__all__ = [
    "uniforms",
    "PathSample",
    "PathBatch",
    "sample_path",
    "sample_paths",
    "feynman_kac_weight",
    "WeightedEstimate",
    "weighted_occupancy",
    "jump_count_term",
    "jump_count_values",
    "RepresentationReport",
    "verify_representation",
    "verify_jump_decomposition",
    "holding_time_test",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_CHUNK = 4096
THREADS_ENV = "CTMC_PERTURB_THREADS"


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def _path_keys(seed: int, paths: np.ndarray) -> np.ndarray:
    base = _mix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) + _GOLDEN)
    return _mix(base ^ (np.asarray(paths, dtype=np.uint64) * _GOLDEN))


def uniforms(seed: int, paths, counters, stream: int) -> np.ndarray:
    """Uniforms in ``[0, 1)`` indexed by path, counter and stream."""
    keys = _path_keys(seed, paths)
    c = np.asarray(counters, dtype=np.uint64) * np.uint64(2) + np.uint64(stream + 1)
    return (_mix(keys + c * _GOLDEN) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def thread_count(requested: int | None = None) -> int:
    """Worker count: ``requested``, else the environment default, else 1."""
    if requested is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        requested = int(env) if env else 1
    return max(1, int(requested))


class _JumpTable:
    """Holding rates and cumulative jump distributions, built lazily per state.

    ``cum`` is normalised by the exit rate ``q_i``; a draw beyond the last
    entry of a non-conservative row kills the path.
    """

    def __init__(self, r: RateMatrix):
        self.r = r
        self.rates = np.zeros(0)
        self.lens = np.zeros(0, dtype=np.int64)
        self.targets = np.zeros((0, 1), dtype=np.int64)
        self.cum = np.full((0, 1), np.inf)

    def ensure(self, top: int) -> None:
        bound = self.r.support_bound
        if bound is not None:
            top = min(top, bound)
        n_old = self.rates.size
        if top < n_old:
            return
        n_new = max(top + 1, 2 * n_old, 16)
        if bound is not None:
            n_new = min(n_new, bound + 1)
        rows = [self.r.row(i) for i in range(n_old, n_new)]
        width = max([self.targets.shape[1]] + [t.size for t, _ in rows])
        targets = np.zeros((n_new, width), dtype=np.int64)
        cum = np.full((n_new, width), np.inf)
        rates = np.zeros(n_new)
        lens = np.zeros(n_new, dtype=np.int64)
        targets[:n_old, :self.targets.shape[1]] = self.targets
        cum[:n_old, :self.cum.shape[1]] = self.cum
        rates[:n_old] = self.rates
        lens[:n_old] = self.lens
        for k, (js, vs) in enumerate(rows, start=n_old):
            keep = vs > 0
            js, vs = js[keep], vs[keep]
            q = self.r.diag(k)
            rates[k] = q
            if js.size == 0 or q <= 0:
                continue
            c = np.cumsum(vs) / q
            if abs(c[-1] - 1.0) <= 1e-12:
                c[-1] = 1.0
            targets[k, :js.size] = js
            cum[k, :js.size] = c
            lens[k] = js.size
        self.rates, self.lens, self.targets, self.cum = rates, lens, targets, cum

    def choose(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Next state for each draw, or ``-1`` for killing."""
        col = (self.cum[states] <= u[:, None]).sum(axis=1)
        dead = col >= self.lens[states]
        nxt = self.targets[states, np.minimum(col, self.cum.shape[1] - 1)]
        return np.where(dead, -1, nxt)


@dataclass
class PathSample:
    """One path on ``[0, T]``: epochs ``jump_times[0] = 0 < ...`` and visited states."""

    jump_times: np.ndarray
    states: np.ndarray
    T: float
    death_time: float = math.inf
    exploded: bool = False
    killed: bool = False

    @property
    def first_jump(self) -> float:
        return float(self.jump_times[1]) if self.jump_times.size > 1 else math.inf

    def alive(self, t: float) -> bool:
        return t < self.death_time

    def state_at(self, t: float) -> int:
        """State at time ``t``, or ``-1`` after death (killing or explosion)."""
        if not self.alive(t):
            return -1
        k = np.searchsorted(self.jump_times, t, side="right") - 1
        return int(self.states[k])

    def jumps_between(self, s: float, t: float) -> int:
        """Number of jumps in ``(s, t]``."""
        jt = self.jump_times[1:]
        return int(np.count_nonzero((jt > s) & (jt <= t)))


@dataclass
class PathBatch:
    """Paths stored back to back; path ``k`` owns epochs ``indptr[k]:indptr[k+1]``."""

    indptr: np.ndarray
    times: np.ndarray
    states: np.ndarray
    death_time: np.ndarray
    exploded: np.ndarray
    killed: np.ndarray
    T: float
    first_index: int = 0

    def __len__(self) -> int:
        return self.indptr.size - 1

    def path(self, k: int) -> PathSample:
        sl = slice(self.indptr[k], self.indptr[k + 1])
        return PathSample(self.times[sl].copy(), self.states[sl].copy(), self.T,
                          float(self.death_time[k]), bool(self.exploded[k]), bool(self.killed[k]))

    def locate(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Epoch index in force at each time ``u`` for each path, and aliveness.

        Returns arrays of shape ``(n_paths, len(u))``.
        """
        u = np.asarray(u, dtype=float)
        n = len(self)
        owner = np.repeat(np.arange(n), np.diff(self.indptr))
        span = self.T + 1.0
        keys = self.times + owner * span
        queries = u[None, :] + (np.arange(n) * span)[:, None]
        pos = np.searchsorted(keys, queries, side="right") - 1
        alive = u[None, :] < self.death_time[:, None]
        return pos, alive

    def cumulative_killing(self, kill: np.ndarray) -> np.ndarray:
        """``int_0^{epoch} a(xi_u) du`` at every stored epoch."""
        rate = kill[self.states]
        seg = np.zeros_like(self.times)
        seg[1:] = rate[:-1] * np.diff(self.times)
        seg[self.indptr[1:-1]] = 0.0
        cum = np.cumsum(seg)
        start = np.repeat(cum[self.indptr[:-1]], np.diff(self.indptr))
        return cum - start

    def weights(self, kill: np.ndarray, u: np.ndarray, pos=None) -> np.ndarray:
        """``M(u)`` per path and time, for killing-rate table ``kill``."""
        if pos is None:
            pos, _ = self.locate(u)
        cum = self.cumulative_killing(kill)
        rate = kill[self.states]
        return np.exp(-(cum[pos] + rate[pos] * (np.asarray(u)[None, :] - self.times[pos])))

    def jump_counts(self, pos: np.ndarray) -> np.ndarray:
        """Jumps up to the located epochs."""
        return pos - self.indptr[:-1, None]


def _simulate_chunk(table: _JumpTable, i: int, T: float, seed: int, first: int, n: int,
                    max_jumps: int, window: Window | None) -> PathBatch:
    pid = np.arange(first, first + n, dtype=np.uint64)
    state = np.full(n, i, dtype=np.int64)
    t = np.zeros(n)
    jumps = np.zeros(n, dtype=np.int64)
    death = np.full(n, math.inf)
    exploded = np.zeros(n, dtype=bool)
    killed = np.zeros(n, dtype=bool)
    rec_p, rec_t, rec_s = [np.arange(n)], [np.zeros(n)], [state.copy()]
    act = np.arange(n)
    table.ensure(i)
    while act.size:
        s = state[act]
        rate = table.rates[s]
        u = uniforms(seed, pid[act], jumps[act], 0)
        with np.errstate(divide="ignore"):
            hold = -np.log1p(-u) / rate
        tn = t[act] + hold
        go = tn <= T
        act, tn, s = act[go], tn[go], s[go]
        if not act.size:
            break
        nxt = table.choose(s, uniforms(seed, pid[act], jumps[act], 1))
        gone = nxt < 0
        if gone.any():
            killed[act[gone]] = True
            death[act[gone]] = tn[gone]
            act, tn, nxt = act[~gone], tn[~gone], nxt[~gone]
        t[act] = tn
        state[act] = nxt
        jumps[act] += 1
        rec_p.append(act)
        rec_t.append(tn)
        rec_s.append(nxt)
        if window is not None:
            out = nxt > window.max_state
            killed[act[out]] = True
            death[act[out]] = tn[out]
            act = act[~out]
        hit = jumps[act] >= max_jumps
        if hit.any():
            exploded[act[hit]] = True
            death[act[hit]] = t[act[hit]]
            act = act[~hit]
        if act.size:
            table.ensure(int(state[act].max()))
    owner = np.concatenate(rec_p)
    order = np.argsort(owner, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(np.bincount(owner, minlength=n))
    return PathBatch(indptr, np.concatenate(rec_t)[order], np.concatenate(rec_s)[order],
                     death, exploded, killed, float(T), first)


def _chunks(n_paths: int, first_index: int, chunk: int):
    return [(first_index + k, min(chunk, n_paths - k)) for k in range(0, n_paths, chunk)]


def _map_chunks(fn, r: RateMatrix, i: int, T: float, n_paths: int, seed: int, max_jumps: int,
                window, first_index: int, chunk: int, threads: int | None):
    if n_paths < 1:
        raise ConfigurationError("n_paths must be at least 1")
    if max_jumps < 1:
        raise ConfigurationError("max_jumps must be at least 1")
    spans = _chunks(n_paths, first_index, chunk)
    # the jump table is shared; build it far enough up front for thread safety
    table = _JumpTable(r)
    table.ensure(max(i, window.max_state) if window is not None else i)

    def run(span):
        first, n = span
        local = table if n_workers == 1 else _copy_table(table)
        return fn(_simulate_chunk(local, i, T, seed, first, n, max_jumps, window))

    n_workers = thread_count(threads)
    if n_workers == 1:
        return [run(s) for s in spans]
    with ThreadPoolExecutor(n_workers) as pool:
        return list(pool.map(run, spans))


def _copy_table(table: _JumpTable) -> _JumpTable:
    out = _JumpTable(table.r)
    out.rates, out.lens, out.targets, out.cum = table.rates, table.lens, table.targets, table.cum
    return out


def sample_paths(r: RateMatrix, i: int, T: float, n_paths: int, seed: int, max_jumps: int = 10**6,
                 window=None, first_index: int = 0, chunk: int = _CHUNK,
                 threads: int | None = None) -> PathBatch:
    """Simulate ``n_paths`` paths of the minimal ``R``-chain from ``i`` on ``[0, T]``.

    A path stops at ``T``, when it leaves ``window`` (killed) or after
    ``max_jumps`` jumps (flagged as exploded).
    """
    window = Window(window) if isinstance(window, int) else window
    parts = _map_chunks(lambda b: b, r, i, T, n_paths, seed, max_jumps, window, first_index,
                        chunk, threads)
    offsets = np.cumsum([0] + [p.times.size for p in parts])
    indptr = np.concatenate([[0]] + [p.indptr[1:] + o for p, o in zip(parts, offsets)])
    return PathBatch(indptr, np.concatenate([p.times for p in parts]),
                     np.concatenate([p.states for p in parts]),
                     np.concatenate([p.death_time for p in parts]),
                     np.concatenate([p.exploded for p in parts]),
                     np.concatenate([p.killed for p in parts]), float(T), first_index)


def sample_path(r: RateMatrix, i: int, T: float, seed: int, max_jumps: int = 10**6,
                path_index: int = 0, window=None) -> PathSample:
    """Path number ``path_index`` of the stream defined by ``seed``."""
    return sample_paths(r, i, T, 1, seed, max_jumps, window, first_index=path_index).path(0)


def _kill_rate(a: BoundedPerturbation, k: int) -> float:
    bound = a.inner.support_bound
    return 0.0 if bound is not None and k > bound else a.inner.diag(k)


def _kill_table(a: BoundedPerturbation, top: int) -> np.ndarray:
    return np.array([_kill_rate(a, k) for k in range(top + 1)])


def feynman_kac_weight(path: PathSample, a: BoundedPerturbation, t: float) -> float:
    """``exp(-int_0^t a(xi_u) du)`` computed exactly over the holding intervals."""
    if t > path.T:
        raise ConfigurationError(f"t={t} beyond the simulated horizon {path.T}")
    ends = np.minimum(np.append(path.jump_times[1:], np.inf), t)
    dur = np.clip(ends - path.jump_times, 0.0, None)
    kill = np.array([_kill_rate(a, int(s)) for s in path.states])
    return math.exp(-float(kill @ dur))


@dataclass
class WeightedEstimate:
    mean: float
    std_error: float
    n_paths: int
    exploded_fraction: float
    killed_fraction: float = 0.0

    @classmethod
    def from_values(cls, values: np.ndarray, exploded: np.ndarray, killed: np.ndarray):
        n = values.size
        se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        return cls(float(values.mean()), se, n, float(exploded.mean()), float(killed.mean()))

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "n_paths": self.n_paths,
                "exploded_fraction": self.exploded_fraction, "killed_fraction": self.killed_fraction}


def _estimate(functional, r, i, T, n_paths, seed, max_jumps, window, threads):
    def per_chunk(batch):
        return functional(batch), batch.exploded, batch.killed

    parts = _map_chunks(per_chunk, r, i, T, n_paths, seed, max_jumps, window, 0, _CHUNK, threads)
    vals = np.concatenate([p[0] for p in parts])
    return WeightedEstimate.from_values(vals, np.concatenate([p[1] for p in parts]),
                                        np.concatenate([p[2] for p in parts]))


def _top_state(batch: PathBatch) -> int:
    return int(batch.states.max()) if batch.states.size else 0


def weighted_occupancy(r: RateMatrix, a: BoundedPerturbation, i: int, j: int, t: float,
                       n_paths: int, seed: int, max_jumps: int = 10**6, window=None,
                       threads: int | None = None) -> WeightedEstimate:
    """Estimate ``E_i[M(t); xi_t = j]``.

    This is the transition function of ``R - diag(a)``: killing only, without
    the off-diagonal jumps of ``A``.
    """
    window = Window(window) if isinstance(window, int) else window

    def functional(batch):
        u = np.array([t])
        pos, alive = batch.locate(u)
        m = batch.weights(_kill_table(a, _top_state(batch)), u, pos)
        return (m * alive * (batch.states[pos] == j))[:, 0]

    return _estimate(functional, r, i, t, n_paths, seed, max_jumps, window, threads)


def jump_count_term(r: RateMatrix, a: BoundedPerturbation, i: int, j: int, t: float, n: int,
                    n_paths: int, seed: int, max_jumps: int = 10**6, window=None,
                    threads: int | None = None) -> WeightedEstimate:
    """Estimate ``E_i[M(t); sigma_t = n, xi_t = j]`` with ``sigma_t`` the jump count on ``(0, t]``."""
    window = Window(window) if isinstance(window, int) else window
    if n < 0:
        raise ConfigurationError("n must be nonnegative")
    return _estimate(lambda batch: jump_count_values(batch, a, j, t, n), r, i, t, n_paths, seed,
                     max_jumps, window, threads)


def jump_count_values(batch: PathBatch, a: BoundedPerturbation, j: int, t: float, n: int) -> np.ndarray:
    """Per-path ``M(t) 1{sigma_t = n, xi_t = j}``."""
    u = np.array([t])
    pos, alive = batch.locate(u)
    m = batch.weights(_kill_table(a, _top_state(batch)), u, pos)
    hit = alive & (batch.states[pos] == j) & (batch.jump_counts(pos) == n)
    return (m * hit)[:, 0]


@dataclass
class RepresentationReport:
    """Monte Carlo estimate against the deterministic value it should reproduce.

    Passes when the gap is within ``z_max`` standard errors plus ``atol``, an
    allowance for the trapezoid rule in the time integral (it matters when
    every path gives the same value and the standard error vanishes).
    """

    estimate: WeightedEstimate
    deterministic: float
    z_max: float = 3.0
    atol: float = 0.0

    @property
    def gap(self) -> float:
        return abs(self.estimate.mean - self.deterministic)

    @property
    def z(self) -> float:
        if self.estimate.std_error == 0:
            return 0.0 if self.gap == 0 else math.inf
        return self.gap / self.estimate.std_error

    @property
    def passed(self) -> bool:
        return self.gap <= self.z_max * self.estimate.std_error + self.atol

    def as_dict(self) -> dict:
        return {**self.estimate.as_dict(), "deterministic": self.deterministic, "gap": self.gap,
                "z": self.z, "z_max": self.z_max, "atol": self.atol, "passed": self.passed}


def _lookup(qfun: TransitionFunction, a: BoundedPerturbation, j: int, m: int) -> np.ndarray:
    """``F[k, s] = sum_{l != s} a_sl Q_lj(t_m - u_k)`` for ``k <= m``."""
    off = a.inner.offdiag(qfun.window)
    qcol = qfun.matrices()[m::-1, :, j]
    return qcol @ off.T


def _integrated(batch, kill, u, w, lookup, select=None):
    pos, alive = batch.locate(u)
    weight = batch.weights(kill, u, pos)
    states = batch.states[pos]
    inside = alive & (states < lookup.shape[1])
    if select is not None:
        inside &= select(pos)
    cols = np.where(inside, states, 0)
    f = lookup[np.arange(u.size)[None, :], cols]
    return (weight * f * inside) @ w, pos, alive, weight


def verify_representation(r: RateMatrix, a: BoundedPerturbation, i: int, j: int, t: float,
                          qfun: TransitionFunction, n_paths: int, seed: int,
                          max_jumps: int = 10**6, z_max: float = 3.0, atol: float | None = None,
                          threads: int | None = None) -> RepresentationReport:
    """Check ``Q_ij(t) = E_i[int_0^t M(u) sum_{l != xi_u} a_{xi_u l} Q_lj(t-u) du + M(t); xi_t = j]``.

    ``qfun`` supplies ``Q`` on a window and grid containing ``t``; paths are
    killed on leaving the window and the time integral uses the trapezoid rule
    on the grid.  ``atol`` defaults to ``h^2``.
    """
    m = qfun.grid.index(t)
    u = qfun.grid.points[:m + 1]
    w = qfun.grid.trapezoid_weights(m)
    lookup = _lookup(qfun, a, j, m)

    def functional(batch):
        kill = _kill_table(a, _top_state(batch))
        integral, pos, alive, weight = _integrated(batch, kill, u, w, lookup)
        end = alive[:, -1] & (batch.states[pos[:, -1]] == j)
        return integral + weight[:, -1] * end

    est = _estimate(functional, r, i, t, n_paths, seed, max_jumps, qfun.window, threads)
    atol = qfun.grid.h**2 if atol is None else atol
    return RepresentationReport(est, qfun.value(m, i, j), z_max, atol)


def verify_jump_decomposition(r: RateMatrix, a: BoundedPerturbation, i: int, j: int, t: float,
                              n: int, q_terms: list, qfun: TransitionFunction, n_paths: int,
                              seed: int, max_jumps: int = 10**6, z_max: float = 3.0,
                              atol: float | None = None,
                              threads: int | None = None) -> RepresentationReport:
    """Check the ``n``-th term of the successive-approximation series of ``Q``.

    ``q_terms[p]`` is an ``(n_t, n, n)`` array holding ``Q^(p)``, the series
    with kernel rate ``q_i`` and jump matrix ``offdiag(Q)``, on the grid of
    ``qfun``.  ``sigma`` counts jumps of the ``R``-chain only.  The expectation is
    ``sum_{p<n} E_i[int_0^t M(u) 1{sigma_u = n-p-1} sum_{l != xi_u} a_{xi_u l} Q^(p)_lj(t-u) du]
    + E_i[M(t); sigma_t = n, xi_t = j]``.
    """
    m = qfun.grid.index(t)
    u = qfun.grid.points[:m + 1]
    w = qfun.grid.trapezoid_weights(m)
    off = a.inner.offdiag(qfun.window)
    lookups = [np.asarray(q_terms[p])[m::-1, :, j] @ off.T for p in range(n)]

    def functional(batch):
        kill = _kill_table(a, _top_state(batch))
        total = 0.0
        pos = alive = weight = None
        for p in range(n):
            k = n - p - 1
            part, pos, alive, weight = _integrated(
                batch, kill, u, w, lookups[p], select=lambda ps, k=k: batch.jump_counts(ps) == k)
            total = total + part
        if pos is None:
            pos, alive = batch.locate(u)
            weight = batch.weights(kill, u, pos)
        end = alive[:, -1] & (batch.states[pos[:, -1]] == j) & (batch.jump_counts(pos)[:, -1] == n)
        return total + weight[:, -1] * end

    est = _estimate(functional, r, i, t, n_paths, seed, max_jumps, qfun.window, threads)
    atol = qfun.grid.h**2 if atol is None else atol
    return RepresentationReport(est, float(np.asarray(q_terms[n])[m, i, j]), z_max, atol)


@dataclass
class HoldingTimeTest:
    statistic: float
    pvalue: float
    rate: float
    n_samples: int

    def as_dict(self) -> dict:
        return {"statistic": self.statistic, "pvalue": self.pvalue, "rate": self.rate,
                "n_samples": self.n_samples}


def holding_time_test(r: RateMatrix, i: int, n_samples: int = 10_000, seed: int = 0) -> HoldingTimeTest:
    """Kolmogorov-Smirnov test of first holding times against ``Exp(r_i)``."""
    rate = r.diag(i)
    if rate <= 0:
        raise ConfigurationError(f"state {i} is absorbing")
    horizon = 60.0 / rate
    batch = sample_paths(r, i, horizon, n_samples, seed, max_jumps=1)
    first = np.where(batch.killed, batch.death_time, np.inf)
    moved = np.diff(batch.indptr) > 1
    first[moved] = batch.times[batch.indptr[:-1][moved] + 1]
    res = stats.kstest(first, "expon", args=(0, 1.0 / rate))
    return HoldingTimeTest(float(res.statistic), float(res.pvalue), float(rate), n_samples)
