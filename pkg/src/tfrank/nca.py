"""Neighborhood component analysis.

Learns a linear map A (d x D) that pulls same-class points together in
the projected space, as a cheap stand-in for how fine-tuning would
reshape a candidate model's embeddings. The objective is the expected
leave-one-out probability that a point picks a same-class neighbor
under a softmax over negative squared projected distances, minus an L2
penalty on A; it is maximized by full-batch gradient ascent with a
backtracking line search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import pca_eig
from .errors import (
    ConfigError,
    DegenerateInput,
    NonFinite,
    NonFiniteValue,
    ShapeMismatch,
    TooFewSamples,
)

_MAX_HALVINGS = 50


@dataclass(frozen=True)
class NcaConfig:
    """Projection size and optimizer knobs."""

    out_dim: int
    max_iters: int = 200
    step_size: float = 0.1
    l2_penalty: float = 0.0
    tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.out_dim < 1:
            raise ConfigError(f"out_dim must be >= 1, got {self.out_dim}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.l2_penalty < 0:
            raise ConfigError(f"l2_penalty must be >= 0, got {self.l2_penalty}")
        if self.tol <= 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")


def default_config(n: int, D: int, C: int, seed: int = 0) -> NcaConfig:
    """Defaults scaled to the data: d = min(D, max(2C, 32)), lambda ~ n/D."""
    return NcaConfig(out_dim=min(D, max(2 * C, 32)),
                     l2_penalty=1e-3 * n / D, seed=seed)


@dataclass(frozen=True)
class NcaModel:
    """A fitted projection and the accepted-objective history."""

    projection: np.ndarray       # (d, D)
    objective_trace: tuple       # accepted objective values, first = init

    def __post_init__(self):
        A = np.asarray(self.projection, dtype=np.float64)
        object.__setattr__(self, "projection", A)
        object.__setattr__(self, "objective_trace", tuple(self.objective_trace))
        if not np.isfinite(A).all():
            raise NonFinite("projection contains non-finite values")
        trace = self.objective_trace
        for t in range(len(trace) - 1):
            if trace[t + 1] < trace[t]:
                raise NonFinite(
                    f"objective decreased at accepted step {t + 1}")
        A.flags.writeable = False


def _check_inputs(A, X, y):
    A = np.asarray(A, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ShapeMismatch(f"X must be 2-D, got shape {X.shape}")
    if A.ndim != 2 or A.shape[1] != X.shape[1]:
        raise ShapeMismatch(
            f"A shape {A.shape} incompatible with X shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise ShapeMismatch(
            f"labels shape {y.shape} does not match n={X.shape[0]}")
    if X.shape[0] < 2:
        raise TooFewSamples(f"need n >= 2, got {X.shape[0]}")
    return A, X, y


def nca_probabilities(A, X) -> np.ndarray:
    """Row-stochastic neighbor matrix P with P[i, i] = 0.

    P[i, j] is the softmax over j != i of the negative squared distance
    between projected points i and j, computed with per-row max
    subtraction for stability.
    """
    A = np.asarray(A, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    emb = X @ A.T
    sq = np.einsum("ij,ij->i", emb, emb)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    np.maximum(d2, 0.0, out=d2)
    logits = -d2
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    return P


def nca_objective(A, X, y, l2_penalty: float = 0.0) -> float:
    """Sum over samples of the same-class neighbor probability, minus
    l2_penalty * ||A||_F^2."""
    A, X, y = _check_inputs(A, X, y)
    P = nca_probabilities(A, X)
    mask = y[:, None] == y[None, :]
    np.fill_diagonal(mask, False)
    val = float((P * mask).sum()) - l2_penalty * float((A * A).sum())
    if not np.isfinite(val):
        raise NonFinite("objective is not finite")
    return val


def nca_gradient(A, X, y, l2_penalty: float = 0.0) -> np.ndarray:
    """Gradient of `nca_objective` with respect to A."""
    A, X, y = _check_inputs(A, X, y)
    P = nca_probabilities(A, X)
    mask = y[:, None] == y[None, :]
    np.fill_diagonal(mask, False)
    M = P * mask
    p = M.sum(axis=1)
    # gradient = 2A X^T L X - 2*lambda*A with L the Laplacian of
    # W_ik = p_i * P_ik - M_ik over pair differences (x_i - x_k)
    W = p[:, None] * P - M
    d_r = W.sum(axis=1)
    d_c = W.sum(axis=0)
    LX = (d_r + d_c)[:, None] * X - W @ X - W.T @ X
    emb = X @ A.T
    grad = 2.0 * (emb.T @ LX) - 2.0 * l2_penalty * A
    if not np.isfinite(grad).all():
        raise NonFinite("gradient is not finite")
    return grad


def _init_projection(X, d: int) -> np.ndarray:
    """Top-d principal directions, scaled so the mean pairwise projected
    distance is sqrt(d); missing rank is padded with zero rows."""
    _mean, comps, _eig = pca_eig(X)
    r = min(d, comps.shape[0])
    if r == 0:
        raise DegenerateInput("all points identical: nothing to project")
    V = np.zeros((d, X.shape[1]))
    V[:r] = comps[:r]
    proj = X @ V.T
    diff = proj[:, None, :] - proj[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu = np.triu_indices(X.shape[0], k=1)
    mean_dist = float(dist[iu].mean())
    if mean_dist == 0.0:
        raise DegenerateInput("all points identical under projection")
    return (np.sqrt(d) / mean_dist) * V


def fit_nca(X, y, cfg: NcaConfig | None = None) -> NcaModel:
    """Maximize the neighbor objective by backtracking gradient ascent.

    Only improving steps are accepted: on a decrease the step is halved
    and the trial repeated. Stops at max_iters, when the relative
    improvement drops below cfg.tol, or when no improving step exists.
    The result is bit-deterministic for fixed inputs and config.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ShapeMismatch(f"X must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise NonFiniteValue("X contains non-finite values")
    n, D = X.shape
    if y.shape != (n,):
        raise ShapeMismatch(f"labels shape {y.shape} does not match n={n}")
    if n < 2:
        raise TooFewSamples(f"need n >= 2, got {n}")
    if len(np.unique(y)) < 2:
        raise DegenerateInput("labels contain a single class")
    if np.ptp(X, axis=0).max() == 0.0:
        raise DegenerateInput("all points identical")
    if cfg is None:
        cfg = default_config(n, D, int(len(np.unique(y))))
    if cfg.out_dim > D:
        raise ConfigError(f"out_dim {cfg.out_dim} exceeds input width {D}")

    A = _init_projection(X, cfg.out_dim)
    lam = cfg.l2_penalty
    f_cur = nca_objective(A, X, y, lam)
    trace = [f_cur]
    step = cfg.step_size
    for _ in range(cfg.max_iters):
        g = nca_gradient(A, X, y, lam)
        improved = False
        for _h in range(_MAX_HALVINGS):
            A_try = A + step * g
            f_try = nca_objective(A_try, X, y, lam)
            if f_try > f_cur:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        rel = (f_try - f_cur) / max(abs(f_cur), 1e-12)
        A, f_cur = A_try, f_try
        trace.append(f_cur)
        if rel < cfg.tol:
            break
    return NcaModel(projection=A, objective_trace=tuple(trace))


def project(model: NcaModel, X) -> np.ndarray:
    """Apply the learned map: row i of the result is A @ X[i]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.projection.shape[1]:
        raise ShapeMismatch(
            f"X shape {X.shape} incompatible with projection "
            f"{model.projection.shape}")
    return X @ model.projection.T
