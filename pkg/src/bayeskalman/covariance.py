"""Error-covariance extraction from learned gains and prior covariances.

All functions are batched over leading axes and accept either arrays or
tape ``Value`` objects, so they can sit inside a training loss.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import ad
from .errors import NumericalError, UnrecoverableCovariance
from .linalg import COND_LIMIT


class IndefiniteCovarianceWarning(RuntimeWarning):
    pass


def _sym(A):
    return 0.5 * (A + ad.transpose(A))


def _eye_like(K, H):
    m = ad.data_of(K).shape[-2]
    return np.eye(m)


def _warn_if_indefinite(P, tol=1e-8):
    Pd = ad.data_of(P)
    if np.any(np.linalg.eigvalsh(Pd) < -tol):
        warnings.warn("extracted covariance has a negative eigenvalue", IndefiniteCovarianceWarning, stacklevel=3)


def extract_cov_update(K, H, sigma_prior, check=True):
    """Posterior covariance ``(I - K H) Sigma_prior``, symmetrised.

    Not PSD-safe for arbitrary gains; an ``IndefiniteCovarianceWarning`` is
    issued when the result has an eigenvalue below -1e-8.
    """
    P = _sym(ad.matmul(_eye_like(K, H) - ad.matmul(K, H), sigma_prior))
    if check:
        _warn_if_indefinite(P)
    return P


def extract_cov_joseph(K, H, sigma_prior, R):
    """Joseph-form posterior ``K R K^T + (I - K H) Sigma_prior (I - K H)^T``."""
    A = _eye_like(K, H) - ad.matmul(K, H)
    P = ad.matmul(ad.matmul(K, R), ad.transpose(K)) + ad.matmul(ad.matmul(A, sigma_prior), ad.transpose(A))
    return _sym(P)


def _full_column_rank(H):
    Hd = ad.data_of(H)
    cols = Hd.shape[-1]
    return bool(np.all(np.linalg.matrix_rank(Hd) == cols))


def recover_prior_from_kg(K, H, R):
    """Prior covariance implied by a gain: ``(I - K H)^{-1} K R H (H^T H)^{-1}``.

    Requires ``H`` with full column rank; raises ``UnrecoverableCovariance``
    otherwise and ``NumericalError`` when ``I - K H`` is ill-conditioned.
    """
    if not _full_column_rank(H):
        raise UnrecoverableCovariance("observation Jacobian lacks full column rank; use recover_prior_submatrix")
    A = _eye_like(K, H) - ad.matmul(K, H)
    cond = np.linalg.cond(ad.data_of(A))
    if not np.all(np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        raise NumericalError(f"I - K H is ill-conditioned (condition number {np.max(cond):.3g})")
    if isinstance(H, ad.Value):
        Ht = ad.transpose(H)
        right = ad.matmul(H, ad.inv(ad.matmul(Ht, H)))
    else:
        # H (H^T H)^{-1} is pinv(H)^T; the SVD route avoids squaring cond(H)
        right = np.swapaxes(np.linalg.pinv(np.asarray(H, dtype=float)), -1, -2)
    rhs = ad.matmul(ad.matmul(K, R), right)
    return _sym(ad.solve(A, rhs))


def recover_prior_submatrix(K, H, R, indices):
    """Gain-to-prior recovery restricted to the state variables in ``indices``.

    Uses the columns of ``H`` and rows of ``K`` belonging to ``indices``; the
    result is the covariance block of those variables.
    """
    idx = list(indices)
    Hd = ad.data_of(H)
    m = Hd.shape[-1]
    if not idx or len(set(idx)) != len(idx) or min(idx) < 0 or max(idx) >= m:
        raise ValueError(f"invalid state index set {indices!r} for m={m}")
    H_sub = ad.getitem(H, (Ellipsis, slice(None), idx))
    K_sub = ad.getitem(K, (Ellipsis, idx, slice(None)))
    if not _full_column_rank(H_sub):
        raise UnrecoverableCovariance(f"columns {idx} of the observation Jacobian are rank deficient")
    return recover_prior_from_kg(K_sub, H_sub, R)


def posterior_from_gain(K, H, R, form="standard", indices=None):
    """Gain-only covariance extraction: recover the prior, then apply the posterior update.

    ``form`` is ``"standard"`` for ``(I - K H) Sigma`` or ``"joseph"``.
    With ``indices`` the computation is restricted to that state block.
    """
    if indices is not None:
        idx = list(indices)
        K = ad.getitem(K, (Ellipsis, idx, slice(None)))
        H = ad.getitem(H, (Ellipsis, slice(None), idx))
    prior = recover_prior_from_kg(K, H, R)
    if form == "joseph":
        return extract_cov_joseph(K, H, prior, R)
    if form == "standard":
        return extract_cov_update(K, H, prior, check=False)
    raise ValueError(f"unknown covariance form {form!r}")
