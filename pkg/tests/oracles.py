"""Closed-form and brute-force reference values."""

import math

import numpy as np
import scipy.linalg as sl

# symmetric 2-state chain, rate 1 each way
P00_AT_1 = 0.5 * (1 + math.exp(-2.0))          # 0.5676676416183064
P01_AT_1 = 0.5 * (1 - math.exp(-2.0))          # 0.4323323583816936

# R + A with A = [[-2, 2], [0, 0]]: generator [[-3, 3], [1, -1]], eigenvalues 0, -4
Q00_AT_1 = 0.25 + 0.75 * math.exp(-4.0)        # 0.26373672916655755
Q01_AT_1 = 0.75 - 0.75 * math.exp(-4.0)
Q11_AT_1 = 0.75 + 0.25 * math.exp(-4.0)

# Feynman-Kac killing only: R - diag(2, 0) = [[-3, 1], [1, -1]], eigenvalues -2 +- sqrt(2)
_S2 = math.sqrt(2.0)
KILLED00_AT_1 = ((1 + 1 / _S2) * math.exp(-(2 + _S2)) + (1 - 1 / _S2) * math.exp(-(2 - _S2))) / 2

FROZEN = {
    "P00_AT_1": 0.5676676416183064,
    "P01_AT_1": 0.4323323583816936,
    "Q00_AT_1": 0.26373672916655755,
    "KILLED00_AT_1": 0.10960597317933718,
}


def two_state_p(t):
    e = math.exp(-2 * t)
    return np.array([[1 + e, 1 - e], [1 - e, 1 + e]]) / 2


def expm_path(q, times):
    """Dense ``expm(t Q)`` for each time (brute-force oracle for finite generators)."""
    return np.stack([sl.expm(t * np.asarray(q, dtype=float)) for t in times])


def brute_series_term1(q, t, n_quad=4000):
    """``Q^(1)_ij(t) = sum_{k != i} int_0^t exp(-q_i (t-s)) q_ik exp(-q_k s) delta_kj ds`` by midpoint loops."""
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    rates = -np.diag(q)
    s = (np.arange(n_quad) + 0.5) * t / n_quad
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            out[i, j] = q[i, j] * np.sum(np.exp(-rates[i] * (t - s)) * np.exp(-rates[j] * s)) * t / n_quad
    return out


def pure_birth_defect_free(rate, n_states, t):
    """Killed pure-birth transition row 0 from the dense exponential."""
    q = np.zeros((n_states, n_states))
    for i in range(n_states):
        q[i, i] = -rate(i)
        if i + 1 < n_states:
            q[i, i + 1] = rate(i)
    return sl.expm(t * q)[0]
