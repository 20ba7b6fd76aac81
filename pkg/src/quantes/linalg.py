"""Small linear-algebra helpers shared across modules."""

import numpy as np

from .exceptions import NumericError, ValidationError

# Eigenvalue floor used when projecting near-singular matrices back to PD.
EIG_FLOOR = 1e-8


def cholesky_with_jitter(a, jitter=1e-10):
    """Lower Cholesky factor of ``a``, retrying once with ``jitter`` on the
    diagonal before giving up."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericError("matrix is not positive definite even after jitter") from exc


def nearest_pd_correlation(a, eig_floor=EIG_FLOOR):
    """Project a symmetric matrix to a positive definite correlation matrix.

    Symmetrizes, clips eigenvalues at ``eig_floor``, then rescales to a unit
    diagonal. Congruence by a positive diagonal preserves definiteness, so a
    single clipping pass suffices.
    """
    a = np.asarray(a, dtype=float)
    sym = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(sym)
    clipped = (vecs * np.maximum(vals, eig_floor)) @ vecs.T
    d = np.sqrt(np.diag(clipped))
    if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
        raise NumericError("cannot rescale matrix with non-positive diagonal")
    corr = clipped / np.outer(d, d)
    np.fill_diagonal(corr, 1.0)
    return 0.5 * (corr + corr.T)


def check_correlation(psi, tol=1e-8):
    """Validate that ``psi`` is a symmetric PD correlation matrix."""
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[0] != psi.shape[1]:
        raise ValidationError("correlation matrix must be square")
    if not np.allclose(psi, psi.T, atol=tol):
        raise ValidationError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(psi), 1.0, atol=tol):
        raise ValidationError("correlation matrix must have a unit diagonal")
    if np.linalg.eigvalsh(psi).min() <= 0.0:
        raise ValidationError("correlation matrix must be positive definite")
    return psi
