"""Reference transferability metrics and their statistical utilities.

LEEP scores a candidate by the log-likelihood of an empirical
source-label -> target-label predictor; NLEEP swaps the source head for
a Gaussian mixture fitted in PCA space; LogME computes the marginalized
evidence of a Bayesian linear head per class; PARC rank-correlates
feature distances with label distances. PCA and a full-covariance
EM-fitted GMM are shared building blocks.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from ._linalg import pca_eig
from ._stats import rank_average as _rank_average
from .errors import (
    ConfigError,
    DegenerateInput,
    EmCollapse,
    LabelOutOfRange,
    NonFinite,
    NonFiniteValue,
    RowNotNormalized,
    ShapeMismatch,
    SvdFailure,
    TooFewSamples,
    ValueOutOfRange,
    ZeroVarianceWarning,
)

_ROW_SUM_TOL = 1e-6
_EM_TOL = 1e-6
_EM_MAX_ITERS = 200
_EM_WEIGHT_FLOOR = 1e-8
_EM_MAX_RESTARTS = 3


def _check_labels(y, n, C=None):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeMismatch(f"labels shape {y.shape} does not match n={n}")
    y = y.astype(np.int64)
    if C is None:
        C = int(y.max()) + 1
    if y.min() < 0 or y.max() >= C:
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    return y, C


# --- PCA ----------------------------------------------------------------------

def pca(X, variance_keep: float = 1.0):
    """Project onto the fewest principal directions retaining at least
    `variance_keep` of the total variance.

    Returns (basis, projected): basis rows are the components (k x D),
    projected is the mean-centered data in that basis (n x k). Only
    positive-eigenvalue directions are ever used, so rank-deficient
    inputs yield a smaller basis.
    """
    if not 0.0 < variance_keep <= 1.0:
        raise ValueOutOfRange(
            f"variance_keep must lie in (0, 1], got {variance_keep}")
    mean, comps, eigvals = pca_eig(X)
    if comps.shape[0] == 0:
        raise DegenerateInput("input has no variance")
    ratios = np.cumsum(eigvals) / eigvals.sum()
    k = int(np.searchsorted(ratios, variance_keep - 1e-12) + 1)
    k = min(k, comps.shape[0])
    basis = comps[:k]
    projected = (np.asarray(X, dtype=np.float64) - mean) @ basis.T
    return basis, projected


# --- GMM ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GmmModel:
    """Full-covariance Gaussian mixture fitted by EM."""

    weights: np.ndarray        # (K,)
    means: np.ndarray          # (K, d)
    covariances: np.ndarray    # (K, d, d)
    log_likelihood_trace: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means",
                           np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "covariances",
                           np.asarray(self.covariances, dtype=np.float64))
        object.__setattr__(self, "log_likelihood_trace",
                           tuple(self.log_likelihood_trace))
        if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
            raise ValueOutOfRange("mixture weights must be >= 0 and sum to 1")
        trace = self.log_likelihood_trace
        for t in range(len(trace) - 1):
            if trace[t + 1] < trace[t]:
                raise NonFinite(f"log-likelihood decreased at step {t + 1}")

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    def log_componentwise(self, X) -> np.ndarray:
        """log(w_k) + log N(x_i; mu_k, Sigma_k) as an (n, K) matrix."""
        X = np.asarray(X, dtype=np.float64)
        n, d = X.shape
        out = np.empty((n, self.K))
        for k in range(self.K):
            try:
                L = np.linalg.cholesky(self.covariances[k])
            except np.linalg.LinAlgError as e:
                raise NonFinite(f"component {k} covariance not SPD") from e
            diff = X - self.means[k]
            z = solve_triangular(L, diff.T, lower=True)
            maha = np.einsum("ij,ij->j", z, z)
            logdet = 2.0 * float(np.log(np.diag(L)).sum())
            out[:, k] = (math.log(self.weights[k])
                         - 0.5 * (d * math.log(2 * math.pi) + logdet + maha))
        return out

    def responsibilities(self, X) -> np.ndarray:
        """Posterior component probabilities; rows sum to 1."""
        lg = self.log_componentwise(X)
        lg -= lg.max(axis=1, keepdims=True)
        R = np.exp(lg)
        R /= R.sum(axis=1, keepdims=True)
        return R

    def log_likelihood(self, X) -> float:
        lg = self.log_componentwise(X)
        mx = lg.max(axis=1, keepdims=True)
        return float((mx[:, 0] + np.log(np.exp(lg - mx).sum(axis=1))).sum())


class _Collapse(Exception):
    pass


def _kmeanspp_centers(X, K, rng):
    n = X.shape[0]
    centers = [X[int(rng.integers(n))]]
    for _ in range(K - 1):
        d2 = np.min(
            [np.einsum("ij,ij->i", X - c, X - c) for c in centers], axis=0)
        total = d2.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
    return np.array(centers)


def _em_once(X, K, rng):
    n, d = X.shape
    means = _kmeanspp_centers(X, K, rng)
    global_cov = np.cov(X.T, bias=False).reshape(d, d)
    ridge0 = 1e-6 * max(np.trace(global_cov), 1e-12) / d
    covs = np.repeat((global_cov + ridge0 * np.eye(d))[None], K, axis=0)
    weights = np.full(K, 1.0 / K)

    model = GmmModel(weights=weights, means=means, covariances=covs,
                     log_likelihood_trace=())
    trace = []
    prev_ll = -np.inf
    prev_model = model
    for it in range(_EM_MAX_ITERS):
        lg = model.log_componentwise(X)
        mx = lg.max(axis=1, keepdims=True)
        ll = float((mx[:, 0] + np.log(np.exp(lg - mx).sum(axis=1))).sum())
        if ll < prev_ll:
            model = prev_model  # numerical dip: keep the better params
            break
        trace.append(ll)
        if it > 0 and ll - prev_ll < _EM_TOL:
            break
        prev_ll = ll
        prev_model = model
        # M-step
        R = np.exp(lg - mx)
        R /= R.sum(axis=1, keepdims=True)
        Nk = R.sum(axis=0)
        weights = Nk / n
        if weights.min() < _EM_WEIGHT_FLOOR:
            raise _Collapse
        means = (R.T @ X) / Nk[:, None]
        covs = np.empty((K, d, d))
        for k in range(K):
            diff = X - means[k]
            cov = (R[:, k][:, None] * diff).T @ diff / Nk[k]
            # ridge keeps each covariance SPD even for tight components
            ridge = 1e-6 * max(np.trace(cov), 1e-12) / d
            covs[k] = cov + ridge * np.eye(d)
        model = GmmModel(weights=weights, means=means, covariances=covs,
                         log_likelihood_trace=())
    return GmmModel(weights=model.weights, means=model.means,
                    covariances=model.covariances,
                    log_likelihood_trace=tuple(trace))


def fit_gmm(X, K: int, seed: int = 0) -> GmmModel:
    """EM fit with k-means++-style seeding.

    A component whose weight collapses below 1e-8 triggers a restart
    with a fresh seed (at most 3); persistent collapse raises EmCollapse.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch(f"X must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise NonFiniteValue("X contains non-finite values")
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if X.shape[0] <= K:
        raise TooFewSamples(f"need n > K, got n={X.shape[0]}, K={K}")
    for attempt in range(_EM_MAX_RESTARTS + 1):
        rng = np.random.default_rng(seed + attempt)
        try:
            return _em_once(X, K, rng)
        except _Collapse:
            continue
    raise EmCollapse(
        f"a mixture component kept collapsing over {_EM_MAX_RESTARTS} restarts")


# --- LEEP / NLEEP -------------------------------------------------------------

def leep(source_probs, y, C: int | None = None) -> float:
    """Log expected empirical prediction.

    Builds the empirical joint of (target label, source class) from the
    candidate's soft predictions, conditions it, and scores the mean log
    probability of the true labels. Always <= 0; source classes that
    receive zero total mass are dropped before conditioning.
    """
    theta = np.asarray(source_probs, dtype=np.float64)
    if theta.ndim != 2:
        raise ShapeMismatch(f"source_probs must be 2-D, got {theta.shape}")
    n, Z = theta.shape
    if n < 1:
        raise TooFewSamples("need at least one sample")
    if not np.isfinite(theta).all():
        raise NonFiniteValue("source_probs contain non-finite values")
    if (theta < 0).any():
        raise RowNotNormalized("source_probs contain negative entries")
    off = np.abs(theta.sum(axis=1) - 1.0)
    if (off > _ROW_SUM_TOL).any():
        i = int(np.argmax(off))
        raise RowNotNormalized(
            f"source_probs row {i} sums to {theta[i].sum():.8f}")
    y, C = _check_labels(y, n, C)

    joint = np.zeros((C, Z))
    np.add.at(joint, y, theta)
    joint /= n
    mass = joint.sum(axis=0)
    keep = mass > 0.0
    cond = joint[:, keep] / mass[keep]
    pred = np.einsum("iz,iz->i", cond[y], theta[:, keep])
    return float(np.log(pred).mean())


def nleep(embeddings, y, variance_keep: float = 0.8, K: int | None = None,
          seed: int = 0) -> float:
    """LEEP with GMM responsibilities in PCA space as the source head."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch(f"embeddings must be 2-D, got {X.shape}")
    y_arr, C = _check_labels(y, X.shape[0], None)
    if K is None:
        K = C
    _basis, projected = pca(X, variance_keep)
    model = fit_gmm(projected, K, seed)
    resp = model.responsibilities(projected)
    return leep(resp, y_arr, C)


# --- LogME --------------------------------------------------------------------

def _logme_one_class(s2, Uty, n, D, rank, yc_sq, trace_out):
    """Evidence maximization for one one-hot target via SVD fixed point."""
    alpha, beta = 1.0, 1.0
    s = s2  # squared singular values, length rank
    proj = Uty  # U^T y_c, length rank
    for _ in range(100):
        gamma = float(np.sum(beta * s / (alpha + beta * s)))
        # m in the right singular basis; its norm is all the update needs
        m_basis = (beta * np.sqrt(s) / (alpha + beta * s)) * proj
        m_sq = float(m_basis @ m_basis)
        # residual ||F m - y||^2 computed in the left singular basis
        fm = (beta * s / (alpha + beta * s)) * proj
        res = float(yc_sq - 2.0 * (proj @ fm) + fm @ fm)
        res = max(res, 1e-300)
        m_sq = max(m_sq, 1e-300)
        alpha_new = gamma / m_sq
        beta_new = (n - gamma) / res
        evidence = _logme_evidence(alpha_new, beta_new, s, proj, yc_sq, n, D,
                                   rank)
        if trace_out is not None:
            trace_out.append(evidence)
        da = abs(alpha_new - alpha) / max(alpha, 1e-300)
        db = abs(beta_new - beta) / max(beta, 1e-300)
        alpha, beta = alpha_new, beta_new
        if da < 1e-6 and db < 1e-6:
            break
    return _logme_evidence(alpha, beta, s, proj, yc_sq, n, D, rank)


def _logme_evidence(alpha, beta, s, proj, yc_sq, n, D, rank):
    coef = beta * s / (alpha + beta * s)
    fm = coef * proj
    res = max(float(yc_sq - 2.0 * (proj @ fm) + fm @ fm), 1e-300)
    m_basis = (beta * np.sqrt(s) / (alpha + beta * s)) * proj
    m_sq = float(m_basis @ m_basis)
    logdet = float(np.sum(np.log(alpha + beta * s))) + (D - rank) * math.log(alpha)
    return (D / 2.0 * math.log(alpha) + n / 2.0 * math.log(beta)
            - beta / 2.0 * res - alpha / 2.0 * m_sq - 0.5 * logdet
            - n / 2.0 * math.log(2 * math.pi))


def logme(embeddings, y, return_traces: bool = False):
    """Mean per-class log marginal evidence of a Bayesian linear head.

    Each class's one-hot target is regressed on the embeddings with an
    isotropic Gaussian prior; prior and noise precision follow from a
    fixed-point iteration on the SVD of the feature matrix. The score
    is the per-sample evidence averaged over classes.
    """
    F = np.asarray(embeddings, dtype=np.float64)
    if F.ndim != 2:
        raise ShapeMismatch(f"embeddings must be 2-D, got {F.shape}")
    n, D = F.shape
    if n < 2:
        raise TooFewSamples(f"need n >= 2, got {n}")
    if not np.isfinite(F).all():
        raise NonFiniteValue("embeddings contain non-finite values")
    y, C = _check_labels(y, n, None)
    try:
        U, sing, Vt = np.linalg.svd(F, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise SvdFailure(f"SVD of feature matrix failed: {e}") from e
    cutoff = max(n, D) * np.finfo(np.float64).eps * (sing[0] if sing.size else 0.0)
    rank = int((sing > cutoff).sum())
    U, sing = U[:, :rank], sing[:rank]
    s2 = sing ** 2

    total = 0.0
    traces = []
    for c in range(C):
        yc = (y == c).astype(np.float64)
        trace: list = [] if return_traces else None
        L_c = _logme_one_class(s2, U.T @ yc, n, D, rank, float(yc @ yc), trace)
        if return_traces:
            traces.append(trace)
        total += L_c / n
    value = total / C
    if return_traces:
        return value, traces
    return value


# --- PARC ---------------------------------------------------------------------

def _row_correlation_distances(X) -> np.ndarray:
    """1 - Pearson between all sample rows; constant rows get distance 1."""
    Xc = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", Xc, Xc))
    zero = norms == 0.0
    if zero.any():
        warnings.warn(
            f"{int(zero.sum())} constant feature rows; using distance 1",
            ZeroVarianceWarning, stacklevel=3)
    safe = np.where(zero, 1.0, norms)
    corr = (Xc @ Xc.T) / np.outer(safe, safe)
    dist = 1.0 - corr
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    return dist


def parc(embeddings, y, C: int | None = None) -> float:
    """Spearman correlation between feature and label distance structure.

    Both distances are 1 - Pearson: across embedding rows for features,
    across one-hot label vectors for labels (0 within class, C/(C-1)
    across classes). Only strict lower-triangle entries enter the rank
    correlation.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch(f"embeddings must be 2-D, got {X.shape}")
    n = X.shape[0]
    if n < 3:
        raise TooFewSamples(f"need n >= 3, got {n}")
    if X.shape[1] < 2:
        raise ShapeMismatch("row-wise Pearson needs at least 2 feature dims")
    if not np.isfinite(X).all():
        raise NonFiniteValue("embeddings contain non-finite values")
    y, C = _check_labels(y, n, C)
    if len(np.unique(y)) < 2:
        raise DegenerateInput("labels contain a single class")

    d_f = _row_correlation_distances(X)
    same = y[:, None] == y[None, :]
    d_y = np.where(same, 0.0, C / (C - 1.0))

    il = np.tril_indices(n, k=-1)
    a = d_f[il]
    b = d_y[il]
    if np.all(a == a[0]):
        raise DegenerateInput("feature distances are constant")
    ra = _rank_average(a)
    rb = _rank_average(b)
    return float(np.corrcoef(ra, rb)[0, 1])
