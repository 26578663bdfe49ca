"""Small batched linear-algebra helpers shared by filters and metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

COND_LIMIT = 1e12
JITTER_SCALE = 1e-9


@dataclass
class FilterOutput:
    """Per-step state estimates ``x`` (T, m) and error covariances ``cov`` (T, m, m).

    Batched runs carry an extra leading trajectory axis on both arrays.
    When ``cov_indices`` is set, ``cov`` covers only those state coordinates.
    """

    x: np.ndarray
    cov: np.ndarray | None = None
    cov_indices: tuple | None = None

    def __len__(self):
        return self.x.shape[-2]


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def jitter(A):
    """``eps * I`` with ``eps = 1e-9 * trace(A) / dim``, broadcast over leading axes."""
    d = A.shape[-1]
    eps = JITTER_SCALE * np.abs(np.trace(A, axis1=-2, axis2=-1)) / d
    eps = np.where(eps > 0, eps, JITTER_SCALE)
    return eps[..., None, None] * np.eye(d)


def safe_cholesky(A, what="matrix"):
    """Cholesky factor of a symmetric matrix, retrying once with trace-scaled jitter."""
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(A + jitter(A))
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite even after jitter") from None


def check_conditioning(A, what="matrix", limit=COND_LIMIT):
    cond = np.linalg.cond(A)
    if not np.all(np.isfinite(cond)) or np.any(cond > limit):
        raise NumericalError(f"{what} is ill-conditioned (condition number {np.max(cond):.3g} > {limit:g})")


def spd_solve(A, B, what="matrix"):
    """``A^{-1} B`` for symmetric positive definite ``A`` (batched)."""
    L = safe_cholesky(A, what)
    Z = np.linalg.solve(L, B)
    return np.linalg.solve(np.swapaxes(L, -1, -2), Z)


def is_psd(A, tol=1e-10) -> bool:
    A = symmetrize(np.asarray(A, dtype=float))
    return bool(np.all(np.linalg.eigvalsh(A) >= -tol))
