"""Desk-scale models shared by the tests, the acceptance suite and the CLI."""

from __future__ import annotations

import numpy as np

from .qmatrix import (BoundedPerturbation, RateMatrix, branching_qmatrix, immigration_resurrection,
                      pure_birth, random_qmatrix)

# Example 1 parameters: binary splitting with death, immigration of 1 or 2
# individuals, resurrection from 0 into 1 or 2.
EXAMPLE1_B = (0.2, -0.5, 0.3)
EXAMPLE1_C = (-0.5, 0.3, 0.2)
EXAMPLE1_H = (-1.0, 0.6, 0.4)


def two_state() -> RateMatrix:
    """Symmetric two-state chain, rate 1 each way."""
    return RateMatrix.from_dense([[-1.0, 1.0], [1.0, -1.0]], name="two_state")


def two_state_perturbation() -> BoundedPerturbation:
    inner = RateMatrix.from_dense([[-2.0, 2.0], [0.0, 0.0]], name="two_state_A")
    return BoundedPerturbation(inner, 2.0)


def random_pair(n_states: int = 20, seed: int = 7) -> tuple[RateMatrix, BoundedPerturbation]:
    r = random_qmatrix(n_states, seed, density=0.5, scale=1.0)
    a = random_qmatrix(n_states, seed + 1000, density=0.2, scale=0.5)
    return r, BoundedPerturbation.from_rate_matrix(a, n_states - 1)


def example1(b=EXAMPLE1_B, c=EXAMPLE1_C, h=EXAMPLE1_H) -> tuple[RateMatrix, BoundedPerturbation]:
    """Branching generator with immigration and resurrection."""
    return branching_qmatrix(b), immigration_resurrection(c, h)


def yule() -> RateMatrix:
    return pure_birth(1.0, 0.0, 1.0)


def explosive_birth() -> RateMatrix:
    """Pure birth with rates ``(i+1)^2``; explodes with positive probability by time 1."""
    return pure_birth(1.0, 1.0, 2.0)


def birth_immigration() -> BoundedPerturbation:
    """Unit-rate immigration ``i -> i+1`` plus resurrection ``0 -> 1``."""
    return immigration_resurrection(np.array([-1.0, 1.0]), np.array([-1.0, 1.0]))
