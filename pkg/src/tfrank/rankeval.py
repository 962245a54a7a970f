"""Rank-correlation evaluation of transferability metrics.

A metric is judged by how well its scores order a pool of candidate
models relative to the ground-truth fine-tuned AUC: weighted Kendall
correlation per target, ordinal ranks of competing metrics per target,
average ranks across targets, a Friedman test of the rank matrix, and
the Nemenyi critical difference for pairwise comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .data import EvalReport, GroundTruthTable, ScoreTable
from .errors import (
    DegenerateRanks,
    IdMismatch,
    LengthMismatch,
    MissingQValue,
    NonFiniteValue,
    TooFewCandidates,
    ValueOutOfRange,
)

#: Studentized-range-derived constants for the Nemenyi test at alpha = 0.05,
#: q_alpha / sqrt(2) for K = 2..10 compared groups (infinite df).
Q_NEMENYI_005 = {
    (0.05, 2): 1.960,
    (0.05, 3): 2.343,
    (0.05, 4): 2.569,
    (0.05, 5): 2.728,
    (0.05, 6): 2.850,
    (0.05, 7): 2.949,
    (0.05, 8): 3.031,
    (0.05, 9): 3.102,
    (0.05, 10): 3.164,
}

TIE_ORDINAL = "ordinal_by_column_order"
TIE_AVERAGE = "average"


@dataclass(frozen=True)
class RankConfig:
    """Knobs for the evaluation protocol."""

    tie_mode: str = TIE_ORDINAL
    missing_mode: str = "lowest_rank"
    alpha: float = 0.05
    q_table: dict = field(default_factory=lambda: dict(Q_NEMENYI_005))

    def __post_init__(self):
        if self.tie_mode not in (TIE_ORDINAL, TIE_AVERAGE):
            raise ValueOutOfRange(f"unknown tie_mode {self.tie_mode!r}")
        if self.missing_mode != "lowest_rank":
            raise ValueOutOfRange(f"unknown missing_mode {self.missing_mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueOutOfRange(f"alpha must lie in (0, 1), got {self.alpha}")


def weighted_kendall_tau(pred, truth) -> float:
    """Hyperbolically weighted Kendall correlation in [-1, 1].

    Pairs involving the top of the ground-truth ordering count more:
    with r_i the position of item i when sorted by `truth` descending
    (best = 0, ties broken by index), each pair (i, j) carries weight
    1/(1+r_i) + 1/(1+r_j) on the product of the score-difference and
    truth-difference signs.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.ndim != 1 or t.ndim != 1 or p.shape != t.shape:
        raise LengthMismatch(
            f"pred has shape {p.shape}, truth has shape {t.shape}")
    K = p.shape[0]
    if K < 2:
        raise TooFewCandidates(f"need at least 2 candidates, got {K}")
    if not np.isfinite(p).all() or not np.isfinite(t).all():
        raise NonFiniteValue("pred/truth contain non-finite values")

    # position in descending-truth order; stable sort breaks ties by index
    order = np.argsort(-t, kind="stable")
    r = np.empty(K, dtype=np.int64)
    r[order] = np.arange(K)

    num = 0.0
    den = 0.0
    for i in range(K):
        for j in range(i + 1, K):
            w = 1.0 / (1.0 + r[i]) + 1.0 / (1.0 + r[j])
            num += w * _sign(p[i] - p[j]) * _sign(t[i] - t[j])
            den += w
    return num / den


def _sign(x: float) -> float:
    if x > 0:
        return 1.0
    if x < 0:
        return -1.0
    return 0.0


def ordinal_ranks(row: dict, cfg: RankConfig | None = None) -> dict:
    """Rank one target's metrics: higher value -> lower (better) rank.

    `row` maps metric name to a value or None/NaN for absent results.
    Absent metrics get the worst ranks (K, K-1, ... by column order).
    Ties among present values follow cfg.tie_mode: ordinal mode lets the
    earlier column win; average mode shares the mean rank.
    """
    cfg = cfg or RankConfig()
    metrics = list(row)
    K = len(metrics)
    present = [(idx, m, float(row[m])) for idx, m in enumerate(metrics)
               if row[m] is not None and not math.isnan(row[m])]
    missing = [m for m in metrics
               if row[m] is None or math.isnan(row[m])]
    if not present:
        raise DegenerateRanks("row has no present values to rank")

    ranks: dict = {}
    if cfg.tie_mode == TIE_ORDINAL:
        by_value = sorted(present, key=lambda e: (-e[2], e[0]))
        for pos, (_idx, m, _v) in enumerate(by_value, start=1):
            ranks[m] = pos
    else:
        vals = np.array([v for _i, _m, v in present])
        # average rank of descending position, 1-based
        desc = np.argsort(-vals, kind="stable")
        pos = np.empty(len(vals))
        pos[desc] = np.arange(1, len(vals) + 1)
        for uniq in np.unique(vals):
            mask = vals == uniq
            pos[mask] = pos[mask].mean()
        for (_idx, m, _v), rk in zip(present, pos):
            ranks[m] = float(rk)
    # worst ranks go to absent metrics, K downward in column order
    for offset, m in enumerate(missing):
        ranks[m] = K - offset
    return {m: ranks[m] for m in metrics}


def average_ranks(rank_matrix) -> np.ndarray:
    """Column means of an N x K rank matrix.

    Uses exactly rounded summation, so the result does not depend on the
    order of the target rows.
    """
    R = np.asarray(rank_matrix, dtype=np.float64)
    if R.ndim != 2:
        raise LengthMismatch(f"rank matrix must be 2-D, got shape {R.shape}")
    N = R.shape[0]
    return np.array([math.fsum(R[:, j]) / N for j in range(R.shape[1])])


def friedman_test(rank_matrix) -> tuple:
    """Friedman chi-square statistic and p-value for an N x K rank matrix.

    chi2_F = 12N/(K(K+1)) * sum_j Rbar_j^2 - 3N(K+1), with the p-value
    from the chi-square survival function at K-1 degrees of freedom.
    """
    R = np.asarray(rank_matrix, dtype=np.float64)
    if R.ndim != 2:
        raise DegenerateRanks(f"rank matrix must be 2-D, got shape {R.shape}")
    N, K = R.shape
    if N < 2:
        raise DegenerateRanks(f"need at least 2 targets, got {N}")
    if K < 3:
        raise DegenerateRanks(f"need at least 3 metrics, got {K}")
    expected = K * (K + 1) / 2.0
    sums = R.sum(axis=1)
    if np.max(np.abs(sums - expected)) > 1e-9:
        i = int(np.argmax(np.abs(sums - expected)))
        raise DegenerateRanks(
            f"row {i} sums to {sums[i]}, not a ranking of 1..{K}")
    mean = average_ranks(R)
    chi2 = (12.0 * N / (K * (K + 1)) * math.fsum(m * m for m in mean)
            - 3.0 * N * (K + 1))
    chi2 = max(chi2, 0.0)
    p = float(gammaincc((K - 1) / 2.0, chi2 / 2.0))
    return chi2, p


def critical_difference(K: int, N: int, alpha: float = 0.05,
                        q_table: dict | None = None) -> float:
    """Nemenyi critical difference q_alpha * sqrt(K(K+1)/(6N))."""
    table = Q_NEMENYI_005 if q_table is None else q_table
    key = (alpha, K)
    if key not in table:
        avail = sorted(set(k for k in table))
        raise MissingQValue(f"no q constant for (alpha={alpha}, K={K}); "
                            f"table covers {avail}")
    return table[key] * math.sqrt(K * (K + 1) / (6.0 * N))


def _tau_matrix_report(targets, metrics, tau, cfg: RankConfig) -> EvalReport:
    """Assemble an EvalReport from a per-(target, metric) tau mapping."""
    rank_rows = []
    ordinal: dict = {}
    for t in targets:
        row = {m: tau[(t, m)] for m in metrics}
        r = ordinal_ranks(row, cfg)
        for m in metrics:
            ordinal[(t, m)] = r[m]
        rank_rows.append([r[m] for m in metrics])
    avg = average_ranks(np.array(rank_rows))
    chi2, p = friedman_test(np.array(rank_rows))
    cd = critical_difference(len(metrics), len(targets), cfg.alpha, cfg.q_table)
    return EvalReport(
        targets=tuple(targets),
        metrics=tuple(metrics),
        per_target_tau=dict(tau),
        ordinal_ranks=ordinal,
        avg_ranks={m: float(a) for m, a in zip(metrics, avg)},
        friedman_chi2=chi2,
        friedman_p=p,
        critical_difference=cd,
        config={"tie_mode": cfg.tie_mode, "missing_mode": cfg.missing_mode,
                "alpha": cfg.alpha},
    )


def evaluate_tau_matrix(targets, metrics, values,
                        cfg: RankConfig | None = None) -> EvalReport:
    """Evaluate a precomputed targets x metrics correlation matrix.

    `values` is an N x K array with NaN marking metrics absent for a
    target (they receive the worst ranks).
    """
    cfg = cfg or RankConfig()
    V = np.asarray(values, dtype=np.float64)
    if V.shape != (len(targets), len(metrics)):
        raise LengthMismatch(
            f"values shape {V.shape} != ({len(targets)}, {len(metrics)})")
    tau = {}
    for i, t in enumerate(targets):
        for j, m in enumerate(metrics):
            v = V[i, j]
            tau[(t, m)] = None if math.isnan(v) else float(v)
    return _tau_matrix_report(list(targets), list(metrics), tau, cfg)


def evaluate(scores_by_target: dict, truth: GroundTruthTable,
             cfg: RankConfig | None = None) -> EvalReport:
    """Score-table evaluation against ground truth.

    `scores_by_target` maps each target name to the list of ScoreTables
    produced by the competing metrics on that target's candidate pool.
    Model ids of every table must match the sources with ground truth
    for that target exactly.
    """
    cfg = cfg or RankConfig()
    missing_targets = [t for t in truth.columns if t not in scores_by_target]
    extra_targets = [t for t in scores_by_target if t not in truth.columns]
    if missing_targets or extra_targets:
        raise IdMismatch(
            f"targets without scores: {missing_targets}; "
            f"scored targets absent from ground truth: {extra_targets}")
    targets = list(truth.columns)

    metrics: list = []
    for t in targets:
        for tbl in scores_by_target[t]:
            if tbl.metric_name not in metrics:
                metrics.append(tbl.metric_name)

    tau: dict = {}
    for t in targets:
        col = truth.column(t)
        ids = [r for r in truth.rows if r in col]
        by_metric = {tbl.metric_name: tbl for tbl in scores_by_target[t]}
        for m in metrics:
            tbl = by_metric.get(m)
            if tbl is None:
                tau[(t, m)] = None
                continue
            got = set(tbl.scores)
            want = set(ids)
            if got != want:
                raise IdMismatch(
                    f"target {t!r}, metric {m!r}: scores missing for "
                    f"{sorted(want - got)}, unknown ids {sorted(got - want)}")
            pred = [tbl.scores[i] for i in ids]
            gt = [col[i] for i in ids]
            tau[(t, m)] = weighted_kendall_tau(pred, gt)
    return _tau_matrix_report(targets, metrics, tau, cfg)
