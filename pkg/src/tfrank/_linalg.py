"""Shared dense linear-algebra helpers (PCA by eigendecomposition)."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch


def pca_eig(X) -> tuple:
    """Principal directions of X by covariance eigendecomposition.

    Returns (mean, components, eigenvalues) with components as rows,
    ordered by descending eigenvalue. Only directions with positive
    eigenvalue are kept, so a rank-deficient input yields fewer rows.
    Each component's sign is fixed so its largest-magnitude loading is
    positive, which makes the basis deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch(f"expected 2-D matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise NonFiniteValue("matrix contains non-finite values")
    n, D = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    denom = max(n - 1, 1)
    cov = (Xc.T @ Xc) / denom
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    comps = eigvecs[:, order].T
    # numerically-zero eigenvalues mark directions without variance
    cutoff = max(eigvals[0], 0.0) * 1e-12 if eigvals.size else 0.0
    keep = eigvals > cutoff
    eigvals = eigvals[keep]
    comps = comps[keep]
    for k in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[k])))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    return mean, comps, eigvals
