"""Small matrix validation helpers used across modules."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatchError, NotSPDError


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    return v


def check_symmetric(m: np.ndarray, tol: float = 1e-10, name: str = "matrix") -> np.ndarray:
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatchError(f"{name} must be square, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > tol * scale:
        raise NotSPDError(f"{name} is not symmetric within {tol:g}")
    return 0.5 * (m + m.T)


def check_spd(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetrize and verify strict positive definiteness via Cholesky."""
    m = check_symmetric(m, name=name)
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise NotSPDError(f"{name} is not positive definite") from None
    return m


def check_psd(m: np.ndarray, tol: float = 1e-8, name: str = "matrix") -> np.ndarray:
    """Symmetrize and verify eigenvalues >= -tol * scale."""
    m = check_symmetric(m, name=name)
    if m.size:
        w = np.linalg.eigvalsh(m)
        scale = max(1.0, float(abs(w).max()))
        if w.min() < -tol * scale:
            raise NotSPDError(f"{name} is not positive semidefinite (min eig {w.min():g})")
    return m


def spectral_radius(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvals(a)).max())
