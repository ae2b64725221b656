"""Orthonormal DCT-II along the time axis and low-pass truncation.

Basis row ``f`` is ``c(f) * cos(pi * (2t + 1) * f / (2T))`` with
``c(0) = sqrt(1/T)`` and ``c(f > 0) = sqrt(2/T)``.  The per-sample index in
the cosine is ``2t + 1``; a ``2T + 1`` reading does not give an orthogonal
basis.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ContractError, DimensionError


@lru_cache(maxsize=32)
def _basis(T: int) -> np.ndarray:
    t = np.arange(T)
    f = np.arange(T)[:, None]
    c = np.full((T, 1), np.sqrt(2.0 / T))
    c[0, 0] = np.sqrt(1.0 / T)
    m = c * np.cos(np.pi * (2 * t[None, :] + 1) * f / (2 * T))
    m.setflags(write=False)
    return m


def dct_matrix(T: int) -> np.ndarray:
    """``T x T`` float64 basis; row f holds frequency f."""
    if T < 1:
        raise ContractError("DCT length must be >= 1")
    return _basis(int(T))


def dct_forward(x, basis: np.ndarray | None = None) -> np.ndarray:
    """Transform along axis 0 (time); trailing axes are independent channels."""
    x = np.asarray(x)
    basis = dct_matrix(x.shape[0]) if basis is None else basis
    if basis.shape[1] != x.shape[0]:
        raise DimensionError(f"signal length {x.shape[0]} vs basis {basis.shape[1]}")
    flat = x.reshape(x.shape[0], -1)
    return (basis.astype(flat.dtype, copy=False) @ flat).reshape(basis.shape[0], *x.shape[1:])


def lowpass_truncate(coeffs, k: int) -> np.ndarray:
    coeffs = np.asarray(coeffs)
    if not 1 <= k <= coeffs.shape[0]:
        raise ContractError(f"cutoff k={k} outside [1, {coeffs.shape[0]}]")
    return coeffs[:k]


def idct_padded(coeffs, T: int, basis: np.ndarray | None = None) -> np.ndarray:
    """Zero-pad ``k`` leading coefficients to ``T`` and invert."""
    coeffs = np.asarray(coeffs)
    k = coeffs.shape[0]
    if k > T:
        raise ContractError(f"{k} coefficients exceed length {T}")
    basis = dct_matrix(T) if basis is None else basis
    flat = coeffs.reshape(k, -1)
    out = basis[:k].T.astype(flat.dtype, copy=False) @ flat
    return out.reshape(T, *coeffs.shape[1:])


def energy_ratio(x, k: int) -> float:
    """Fraction of the signal energy carried by the first ``k`` coefficients."""
    c = dct_forward(np.asarray(x, dtype=np.float64))
    total = float(np.sum(c * c))
    return float(np.sum(c[:k] ** 2)) / total if total > 0 else 1.0
