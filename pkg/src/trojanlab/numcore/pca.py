from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor


class DegenerateCovarianceError(ValueError):
    def __init__(self, rank: int, needed: int) -> None:
        super().__init__(f"covariance has rank {rank}, need at least {needed} components")
        self.rank = rank
        self.needed = needed


def _rank(eigvals: np.ndarray) -> int:
    top = float(eigvals.max(initial=0.0))
    if top <= 0.0:
        return 0
    return int(np.sum(eigvals > top * 1e-12))


def pca_components(points, out_dim: int = 2, allow_degenerate: bool = False):
    """Top principal axes of mean-centred ``points`` from the covariance eigendecomposition.

    Returns ``(mean, components)`` with ``components`` shaped (d, out_dim), columns in
    descending eigenvalue order, each signed so its largest-magnitude entry is positive.
    With ``allow_degenerate`` the axes beyond the covariance rank are zero columns
    instead of raising :class:`DegenerateCovarianceError`.
    """
    x = as_tensor(points).data
    if x.ndim != 2:
        raise DimensionError(f"pca expects an n x d matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise DimensionError(f"pca needs at least 2 points, got {n}")
    if d < out_dim:
        raise DimensionError(f"cannot project {d}-dimensional points onto {out_dim} components")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1]
    vals, vecs = vals[order], vecs[:, order]
    rank = _rank(vals)
    if rank < out_dim and not allow_degenerate:
        raise DegenerateCovarianceError(rank, out_dim)
    comps = vecs[:, :out_dim].copy()
    comps[:, rank:] = 0.0
    for j in range(min(rank, out_dim)):
        k = int(np.argmax(np.abs(comps[:, j])))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return mean, comps


def pca_fit_transform(points, out_dim: int = 2, allow_degenerate: bool = False) -> Tensor:
    mean, comps = pca_components(points, out_dim, allow_degenerate)
    return Tensor((as_tensor(points).data - mean) @ comps)
