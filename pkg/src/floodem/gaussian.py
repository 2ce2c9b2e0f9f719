"""Multivariate Gaussian numerics shared by both EM variants.

Everything runs through a Cholesky factor in log space: feature values in the
target rasters are large enough that raw densities underflow, and posterior
collapse during EM can leave near-singular covariance estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateError, DimError

_LOG_2PI = float(np.log(2.0 * np.pi))


def _base_epsilon(cov: np.ndarray) -> float:
    """Scale-aware jitter: 1e-9 of the mean diagonal entry, with an absolute floor."""
    trace = float(np.trace(cov))
    if trace > 0.0:
        return 1e-9 * trace / cov.shape[0]
    return 1e-9


def regularize(cov: np.ndarray, epsilon: float) -> np.ndarray:
    """Return ``cov + e*I`` for the smallest e in {epsilon, 10*epsilon, ...} with a valid Cholesky.

    Always adds at least ``epsilon`` even when ``cov`` is already positive
    definite, so repair is deterministic rather than conditional.
    """
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise DataError("covariance contains non-finite entries")
    eps = float(epsilon) if epsilon > 0.0 else 1e-9
    eye = np.eye(cov.shape[0])
    while True:
        candidate = cov + eps * eye
        try:
            np.linalg.cholesky(candidate)
        except np.linalg.LinAlgError:
            eps *= 10.0
        else:
            return candidate


@dataclass
class GaussianParams:
    """Mean vector and positive-definite covariance of one class's feature distribution.

    The covariance is symmetrized on construction and, if Cholesky fails on
    the symmetrized matrix, repaired with `regularize`. The factor is cached
    so per-pixel density evaluation is a single triangular multiply.
    """

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _chol_inv: np.ndarray = field(init=False, repr=False, compare=False)
    _log_norm: float = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        m = self.mean.size
        if cov.shape != (m, m):
            raise DimError(f"covariance shape {cov.shape} does not match mean dimension {m}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(cov))):
            raise DataError("Gaussian parameters contain non-finite entries")
        cov = (cov + cov.T) / 2.0
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            cov = regularize(cov, _base_epsilon(cov))
            chol = np.linalg.cholesky(cov)
        self.cov = cov
        self._chol = chol
        self._chol_inv = np.linalg.inv(chol)
        self._log_norm = -0.5 * m * _LOG_2PI - float(np.sum(np.log(np.diag(chol))))

    @property
    def dim(self) -> int:
        return self.mean.size


def log_pdf(g: GaussianParams, x: np.ndarray) -> np.ndarray | float:
    """Log density ln N(x; mean, cov), for a single vector or a (n, m) batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.ndim != 2 or pts.shape[1] != g.dim:
        raise DimError(f"point dimension {x.shape} does not match Gaussian dimension {g.dim}")
    z = (pts - g.mean) @ g._chol_inv.T
    maha = np.einsum("ij,ij->i", z, z)
    out = g._log_norm - 0.5 * maha
    return float(out[0]) if single else out


def weighted_mle(points: np.ndarray, weights: np.ndarray) -> GaussianParams:
    """Weighted maximum-likelihood Gaussian fit.

    Mean is the weighted average; covariance is the weighted outer-product
    average around that mean, then jittered through `regularize` so the
    result always factorizes.
    """
    try:
        pts = np.asarray(points, dtype=float)
    except ValueError as exc:
        raise DimError("points do not share a common dimension") from exc
    if pts.ndim != 2:
        pts = np.atleast_2d(pts.reshape(len(pts), -1))
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != pts.shape[0]:
        raise DimError(f"{pts.shape[0]} points but {w.shape[0]} weights")
    if np.any(w < 0):
        raise DataError("negative weight")
    total = float(w.sum())
    if not total > 0.0:
        raise DegenerateError("total weight is zero")
    mean = (w @ pts) / total
    centered = pts - mean
    cov = (centered * w[:, None]).T @ centered / total
    cov = (cov + cov.T) / 2.0
    cov = regularize(cov, _base_epsilon(cov))
    return GaussianParams(mean, cov)
