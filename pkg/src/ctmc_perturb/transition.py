"""Time grids and grid-sampled transition functions, with CSV/binary I/O."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, ModelFileError
from .qmatrix import Window

__all__ = ["TimeGrid", "TransitionFunction", "SeriesTerm", "load_transition"]

BINARY_MAGIC = b"CTMCTF01"
CSV_MAGIC = "# ctmc_perturb transition function v1"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0, h, 2h, ..., T``."""

    T: float
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigurationError(f"grid step must be positive, got {self.h}")
        if self.T < self.h * (1 - 1e-12):
            raise ConfigurationError(f"horizon T={self.T} is shorter than the step h={self.h}")
        n = self.T / self.h
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigurationError(f"T={self.T} is not a multiple of h={self.h}")

    @classmethod
    def uniform(cls, T: float, n_steps: int) -> "TimeGrid":
        return cls(float(T), float(T) / int(n_steps))

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.h))

    @property
    def size(self) -> int:
        return self.n_steps + 1

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.size) * self.h

    def index(self, t: float) -> int:
        """Grid index of time ``t``; ``t`` must lie on the grid."""
        m = t / self.h
        if abs(m - round(m)) > 1e-9 * max(1.0, m) or not 0 <= round(m) <= self.n_steps:
            raise ConfigurationError(f"t={t} is not a point of the grid (h={self.h}, T={self.T})")
        return int(round(m))

    def trapezoid_weights(self, m: int) -> np.ndarray:
        """Trapezoid weights for integrating over ``[0, t_m]``."""
        w = np.full(m + 1, self.h)
        if m == 0:
            return np.zeros(1)
        w[0] = w[-1] = self.h / 2
        return w


@dataclass
class SeriesTerm:
    """One term of the successive-approximation series, sampled on a grid.

    ``values`` has shape ``(n_times, n_states, n_states)``.
    """

    n: int
    values: np.ndarray


@dataclass
class TransitionFunction:
    """Substochastic matrices ``P(t)`` sampled on a time grid.

    ``values[m, r, j]`` is ``P_{rows[r], j}(t_m)``; by default every window
    state is a row.  ``info`` holds solver diagnostics.
    """

    window: Window
    grid: TimeGrid
    values: np.ndarray
    rows: np.ndarray = None
    solver: str = ""
    tol: float = 0.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rows is None:
            self.rows = np.arange(self.window.size)
        self.rows = np.asarray(self.rows, dtype=np.int64)
        expected = (self.grid.size, self.rows.size, self.window.size)
        if self.values.shape != expected:
            raise ConfigurationError(f"values have shape {self.values.shape}, expected {expected}")

    @property
    def full(self) -> bool:
        return self.rows.size == self.window.size and bool(np.all(self.rows == np.arange(self.window.size)))

    def row_index(self, i: int) -> int:
        hits = np.flatnonzero(self.rows == i)
        if hits.size == 0:
            raise ConfigurationError(f"row {i} was not computed (rows={self.rows.tolist()})")
        return int(hits[0])

    def value(self, t_index: int, i: int, j: int) -> float:
        return float(self.values[t_index, self.row_index(i), j])

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=2)

    def matrices(self) -> np.ndarray:
        """Full ``(n_times, n, n)`` array; requires all rows."""
        if not self.full:
            raise ConfigurationError("this transition function only holds a subset of rows")
        return self.values

    def header(self) -> dict:
        return {"N": int(self.window.max_state), "T": float(self.grid.T), "h": float(self.grid.h),
                "solver": self.solver, "tolerance": float(self.tol), "rows": self.rows.tolist()}

    def to_csv(self, path) -> None:
        """Write long-format ``t,i,j,value`` rows after a ``#`` metadata header."""
        hdr = self.header()
        n_t, n_r, n_s = self.values.shape
        t = np.repeat(self.grid.points, n_r * n_s)
        i = np.tile(np.repeat(self.rows, n_s), n_t)
        j = np.tile(np.arange(n_s), n_t * n_r)
        buf = io.StringIO()
        buf.write(CSV_MAGIC + "\n")
        buf.write("# " + json.dumps(hdr, sort_keys=True) + "\n")
        buf.write("t,i,j,value\n")
        table = np.column_stack([t, i, j, self.values.reshape(-1)])
        np.savetxt(buf, table, fmt=["%.17g", "%d", "%d", "%.17g"], delimiter=",")
        Path(path).write_text(buf.getvalue())

    def to_binary(self, path) -> None:
        """Magic, little-endian header length, JSON header, then float64 values."""
        hdr = json.dumps(self.header(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<Q", len(hdr)))
            fh.write(hdr)
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    def save(self, path) -> None:
        if str(path).endswith(".csv"):
            self.to_csv(path)
        else:
            self.to_binary(path)


def _from_header(hdr: dict, values: np.ndarray) -> TransitionFunction:
    window = Window(int(hdr["N"]))
    grid = TimeGrid(float(hdr["T"]), float(hdr["h"]))
    rows = np.asarray(hdr["rows"], dtype=np.int64)
    values = values.reshape(grid.size, rows.size, window.size)
    return TransitionFunction(window, grid, values, rows, hdr["solver"], float(hdr["tolerance"]))


def load_transition(path) -> TransitionFunction:
    """Read a transition function written by ``to_csv`` or ``to_binary``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(BINARY_MAGIC):
        (n,) = struct.unpack("<Q", raw[8:16])
        hdr = json.loads(raw[16:16 + n])
        values = np.frombuffer(raw[16 + n:], dtype="<f8").astype(float)
        return _from_header(hdr, values)
    text = raw.decode()
    lines = text.split("\n", 3)
    if len(lines) < 3 or lines[0] != CSV_MAGIC or not lines[1].startswith("# "):
        raise ModelFileError(f"{path}: not a transition-function file")
    hdr = json.loads(lines[1][2:])
    if lines[2] != "t,i,j,value":
        raise ModelFileError(f"{path}: line 3: unexpected column header {lines[2]!r}")
    table = np.loadtxt(io.StringIO(lines[3]), delimiter=",", ndmin=2)
    return _from_header(hdr, table[:, 3])
