"""Trapezoid convolutions of matrix-valued functions sampled on a uniform grid."""

from __future__ import annotations

import numpy as np

__all__ = ["MatrixConvolver", "convolve", "trapezoid"]


class MatrixConvolver:
    """Evaluate ``C(t_m) = int_0^{t_m} K(t_m - s) F(s) ds`` for a fixed kernel.

    ``kernel`` has shape ``(n_t, n, k)``; the right factor passed to
    :meth:`apply` has shape ``(n_t, k, p)``.  Each time slice is one BLAS
    product over the stacked history, so the kernel is laid out once and reused
    across calls (Picard sweeps).
    """

    def __init__(self, kernel: np.ndarray, h: float):
        self.kernel = np.asarray(kernel, dtype=float)
        self.h = float(h)
        n_t, n, k = self.kernel.shape
        self._stacked = np.ascontiguousarray(self.kernel.transpose(1, 0, 2))

    def apply(self, f: np.ndarray, times=None) -> np.ndarray:
        n_t, n, k = self.kernel.shape
        f = np.asarray(f, dtype=float)
        p = f.shape[2]
        rev = np.ascontiguousarray(f[::-1])
        times = range(n_t) if times is None else times
        out = np.zeros((n_t, n, p))
        for m in times:
            if m == 0:
                continue
            left = self._stacked[:, :m + 1, :].reshape(n, (m + 1) * k)
            right = rev[n_t - 1 - m:].reshape((m + 1) * k, p)
            full = left @ right
            ends = self.kernel[0] @ f[m] + self.kernel[m] @ f[0]
            out[m] = self.h * full - 0.5 * self.h * ends
        return out


def convolve(kernel: np.ndarray, f: np.ndarray, h: float, times=None) -> np.ndarray:
    """One-shot :class:`MatrixConvolver` evaluation."""
    return MatrixConvolver(kernel, h).apply(f, times)


def trapezoid(values: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """Composite trapezoid rule over the whole sampled axis."""
    return np.trapezoid(values, dx=h, axis=axis)
