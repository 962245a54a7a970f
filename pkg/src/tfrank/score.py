"""The transferability score: label feasibility times feature update.

S_LP measures how predictable the target labels are after a learned
projection of a candidate's embeddings (sum of leave-one-out 5-NN label
probabilities). S_FU measures how much a candidate's early layers would
move under a metric loss (ratio of conv2 to conv1 gradient norms,
consumed from the bundle). Both are min-max normalized across the
candidate pool and combined, by default as a product.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import CandidateBundle, ScoreTable, TargetSet
from .errors import (
    ConfigError,
    DegeneratePoolWarning,
    DimensionMismatch,
    DuplicateIdentifier,
    EmptyPool,
    IndexOutOfRange,
    MissingGradNormsWarning,
    NonFinite,
    NoValidTriplet,
    TooFewCandidates,
    TooFewSamples,
    ValueOutOfRange,
    ZeroDenominator,
)
from .nca import NcaConfig, default_config, fit_nca, project

REDUCTION_MEAN_ALL = "mean_all"
REDUCTION_MEAN_NONZERO = "mean_nonzero"

IN_DOMAIN = "in_domain"
CROSS_DOMAIN = "cross_domain"


@dataclass(frozen=True)
class KnnConfig:
    """Neighborhood size for the label-probability estimate."""

    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class TripletConfig:
    """Triplet sampling and margin-loss parameters."""

    margin: float = 0.05
    triplets_per_anchor: int = 1
    seed: int = 0
    reduction: str = REDUCTION_MEAN_NONZERO

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.triplets_per_anchor < 1:
            raise ConfigError(
                f"triplets_per_anchor must be >= 1, got {self.triplets_per_anchor}")
        if self.reduction not in (REDUCTION_MEAN_ALL, REDUCTION_MEAN_NONZERO):
            raise ConfigError(f"unknown reduction {self.reduction!r}")


@dataclass(frozen=True)
class CombineMode:
    """How the two normalized terms merge into one score."""

    variant: str = "product"
    direction: str = IN_DOMAIN

    def __post_init__(self):
        if self.variant not in ("product", "sum"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.direction not in (IN_DOMAIN, CROSS_DOMAIN):
            raise ConfigError(f"unknown direction {self.direction!r}")


def knn_neighbors(Xp, k: int) -> np.ndarray:
    """Indices of each row's k nearest rows (self excluded).

    Euclidean metric; distance ties resolve to the lower index. Output
    row i lists i's neighbors in ascending (distance, index) order.
    """
    Xp = np.asarray(Xp, dtype=np.float64)
    n = Xp.shape[0]
    if k >= n:
        raise TooFewSamples(f"k={k} requires more than {k} samples, got {n}")
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        diff = Xp - Xp[i]
        d2 = np.einsum("ij,ij->i", diff, diff)
        d2[i] = np.inf
        order = np.argsort(d2, kind="stable")
        out[i] = order[:k]
    return out


def knn_label_probability(Xp, y, cfg: KnnConfig | None = None) -> np.ndarray:
    """Leave-one-out fraction of each point's k nearest neighbors that
    share its label."""
    cfg = cfg or KnnConfig()
    y = np.asarray(y)
    Xp = np.asarray(Xp, dtype=np.float64)
    if y.shape != (Xp.shape[0],):
        raise DimensionMismatch(
            f"labels shape {y.shape} does not match n={Xp.shape[0]}")
    nbrs = knn_neighbors(Xp, cfg.k)
    return (y[nbrs] == y[:, None]).sum(axis=1) / float(cfg.k)


def s_lp(target: TargetSet, bundle: CandidateBundle,
         nca_cfg: NcaConfig | None = None,
         knn_cfg: KnnConfig | None = None) -> float:
    """Label-feasibility score: fit a projection on the candidate's
    embeddings against the target labels, then sum the 5-NN label
    probabilities in the projected space. Lies in [0, n]."""
    if bundle.n != target.n:
        raise DimensionMismatch(
            f"bundle {bundle.model_id!r} has {bundle.n} rows, "
            f"target has {target.n}")
    if nca_cfg is None:
        nca_cfg = default_config(target.n, bundle.D, target.C)
    model = fit_nca(bundle.embeddings, target.labels, nca_cfg)
    Z = project(model, bundle.embeddings)
    probs = knn_label_probability(Z, target.labels, knn_cfg)
    return float(probs.sum())


def sample_triplets(y, cfg: TripletConfig | None = None) -> list:
    """Deterministic (anchor, positive, negative) index triples.

    Every sample whose class has another member anchors exactly
    cfg.triplets_per_anchor triplets; the positive is uniform over the
    anchor's classmates, the negative uniform over all other classes.
    """
    cfg = cfg or TripletConfig()
    y = np.asarray(y)
    n = y.shape[0]
    classes, counts = np.unique(y, return_counts=True)
    by_class = {c: np.flatnonzero(y == c) for c in classes}
    eligible = [i for i in range(n)
                if counts[np.searchsorted(classes, y[i])] >= 2
                and n > len(by_class[y[i]])]
    if not eligible:
        raise NoValidTriplet(
            "no anchor has both a same-class positive and a negative")
    rng = np.random.default_rng(cfg.seed)
    triplets = []
    for a in eligible:
        same = by_class[y[a]]
        same = same[same != a]
        other = np.flatnonzero(y != y[a])
        for _ in range(cfg.triplets_per_anchor):
            p = int(same[rng.integers(len(same))])
            neg = int(other[rng.integers(len(other))])
            triplets.append((a, p, neg))
    return triplets


def triplet_loss_and_embedding_grads(Xe, triplets, margin: float,
                                     reduction: str = REDUCTION_MEAN_NONZERO):
    """Triplet margin loss and its exact subgradient w.r.t. embeddings.

    Per triplet: max(||x_a - x_p|| - ||x_a - x_n|| + margin, 0).
    Inactive triplets contribute zero loss and zero gradient; a zero
    anchor-positive or anchor-negative distance uses the zero direction.
    """
    Xe = np.asarray(Xe, dtype=np.float64)
    n = Xe.shape[0]
    for t in triplets:
        for idx in t:
            if not 0 <= idx < n:
                raise IndexOutOfRange(f"triplet index {idx} outside [0, {n})")
    per_loss = []
    contribs = []
    for a, p, q in triplets:
        v_ap = Xe[a] - Xe[p]
        v_an = Xe[a] - Xe[q]
        d_ap = math.sqrt(float(v_ap @ v_ap))
        d_an = math.sqrt(float(v_an @ v_an))
        loss = d_ap - d_an + margin
        if loss > 0:
            u_ap = v_ap / d_ap if d_ap > 0 else np.zeros_like(v_ap)
            u_an = v_an / d_an if d_an > 0 else np.zeros_like(v_an)
            contribs.append((a, p, q, u_ap, u_an))
            per_loss.append(loss)
        else:
            per_loss.append(0.0)
            contribs.append(None)
    count = len(triplets) if reduction == REDUCTION_MEAN_ALL else sum(
        1 for c in contribs if c is not None)
    grad = np.zeros_like(Xe)
    if count == 0:
        return 0.0, grad
    scale = 1.0 / count
    total = 0.0
    for loss, c in zip(per_loss, contribs):
        if c is None:
            continue
        total += loss
        a, p, q, u_ap, u_an = c
        grad[a] += scale * (u_ap - u_an)
        grad[p] -= scale * u_ap
        grad[q] += scale * u_an
    return total * scale, grad


def s_fu(grad_norm_conv1: float, grad_norm_conv2: float) -> float:
    """Feature-update score: ratio of the second conv layer's gradient
    norm to the first's."""
    for tag, g in (("conv1", grad_norm_conv1), ("conv2", grad_norm_conv2)):
        if not math.isfinite(g):
            raise NonFinite(f"grad_norm_{tag} = {g} is not finite")
        if g < 0:
            raise ValueOutOfRange(f"grad_norm_{tag} = {g} is negative")
    if grad_norm_conv1 == 0.0:
        raise ZeroDenominator("first conv layer gradient norm is zero")
    return grad_norm_conv2 / grad_norm_conv1


def minmax_normalize(values: dict, direction: str = IN_DOMAIN) -> dict:
    """Min-max normalization over a candidate pool.

    in_domain maps the largest raw value to 1; cross_domain inverts the
    scale so the smallest raw value maps to 1. When all values are equal
    the pool carries no signal: every candidate gets 0.5 and a
    DegeneratePoolWarning is emitted.
    """
    if direction not in (IN_DOMAIN, CROSS_DOMAIN):
        raise ConfigError(f"unknown direction {direction!r}")
    if len(values) < 2:
        raise TooFewCandidates(
            f"normalization needs >= 2 candidates, got {len(values)}")
    vals = list(values.values())
    lo, hi = min(vals), max(vals)
    if lo == hi:
        warnings.warn("all candidates scored identically; returning 0.5",
                      DegeneratePoolWarning, stacklevel=2)
        return {k: 0.5 for k in values}
    if direction == IN_DOMAIN:
        return {k: (v - lo) / (hi - lo) for k, v in values.items()}
    return {k: (v - hi) / (lo - hi) for k, v in values.items()}


def combined_score(target: TargetSet, bundles: list,
                   mode: CombineMode | None = None,
                   nca_cfg: NcaConfig | None = None,
                   knn_cfg: KnnConfig | None = None) -> ScoreTable:
    """Score a candidate pool and combine the two normalized terms.

    Candidates without gradient norms fall back to their normalized
    label-feasibility term alone (flagged in components). The returned
    table's argmax_model() is the selection rule: highest score wins.
    """
    mode = mode or CombineMode()
    if not bundles:
        raise EmptyPool("no candidate bundles to score")
    ids = [b.model_id for b in bundles]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DuplicateIdentifier(f"duplicate model ids {dup}")
    if len(bundles) < 2:
        raise TooFewCandidates(
            f"pool normalization needs >= 2 candidates, got {len(bundles)}")

    lp_raw = {b.model_id: s_lp(target, b, nca_cfg, knn_cfg) for b in bundles}
    fu_raw = {}
    for b in bundles:
        if b.has_grad_norms:
            fu_raw[b.model_id] = s_fu(b.grad_norm_conv1, b.grad_norm_conv2)

    missing = [m for m in ids if m not in fu_raw]
    if missing:
        warnings.warn(
            f"bundles without gradient norms fall back to the label term: "
            f"{missing}", MissingGradNormsWarning, stacklevel=2)
    lp_norm = minmax_normalize(lp_raw, mode.direction)
    if len(fu_raw) >= 2:
        fu_norm = minmax_normalize(fu_raw, mode.direction)
    else:
        # a single candidate with norms cannot be pool-normalized
        fu_norm = {}

    scores = {}
    components = {}
    for m in ids:
        lp_n = lp_norm[m]
        if m in fu_norm:
            fu_n = fu_norm[m]
            combined = lp_n * fu_n if mode.variant == "product" else lp_n + fu_n
            components[m] = {
                "s_lp_raw": lp_raw[m], "s_fu_raw": fu_raw[m],
                "s_lp": lp_n, "s_fu": fu_n, "fallback": False,
            }
        else:
            combined = lp_n
            components[m] = {
                "s_lp_raw": lp_raw[m], "s_fu_raw": None,
                "s_lp": lp_n, "s_fu": None, "fallback": True,
            }
        scores[m] = combined
    name = "ours" if mode.variant == "product" else "ours-sum"
    return ScoreTable(metric_name=name, scores=scores, components=components,
                      mode=mode.direction)
