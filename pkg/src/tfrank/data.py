"""Core domain types and on-disk formats.

A *candidate bundle* packages what one pre-trained model exports for a
labeled target set: embeddings of every target sample, optionally the
source-head class probabilities, and optionally the L2 norms of the first
two conv-layer gradients from a metric-loss backward pass. A *target set*
is the labeled dataset itself in embedding form. Both share one binary
container (see `save_bundle`); ground truth and evaluation tables are CSV
and JSON.

Binary container layout (little-endian):

    magic   4 bytes  b"TFRB"
    version u32      1
    n       u64      row count
    D       u64      embedding width
    Z       u64      source-head class count (0 = no probabilities)
    flags   u32      bit0 labels present, bit1 grad norms present
    labels  n x i64          (iff bit0)
    emb     n*D x f64 row-major
    probs   n*Z x f64 row-major (iff Z > 0)
    norms   2 x f64  conv1, conv2 (iff bit1)

A sidecar ``<path>.meta.json`` carries the string metadata (model_id,
source_dataset, architecture, free-form provenance; class_count for
target sets).
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateIdentifier,
    InvariantViolation,
    IoError,
    LabelOutOfRange,
    MalformedHeader,
    NonFiniteValue,
    ParseError,
    ValueOutOfRange,
)

_MAGIC = b"TFRB"
_VERSION = 1
_FLAG_LABELS = 1
_FLAG_GRADNORMS = 2

_PROB_ROW_TOL = 1e-6


def _as_f64(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteValue(f"{name} contains a non-finite value at index {tuple(bad)}")
    return arr


@dataclass(frozen=True, eq=False)
class TargetSet:
    """A labeled target dataset in embedding form."""

    name: str
    embeddings: np.ndarray  # (n, D) float64
    labels: np.ndarray      # (n,) int64 in [0, C)
    C: int

    def __post_init__(self):
        emb = _as_f64(self.embeddings, "embeddings")
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)
        if emb.ndim != 2:
            raise DimensionMismatch(f"embeddings must be 2-D, got shape {emb.shape}")
        n, D = emb.shape
        if labels.shape != (n,):
            raise DimensionMismatch(
                f"labels shape {labels.shape} does not match n={n}")
        if n < 2:
            raise InvariantViolation(f"need n >= 2 samples, got {n}")
        if D < 1:
            raise InvariantViolation("need D >= 1")
        if self.C < 2:
            raise InvariantViolation(f"need C >= 2 classes, got {self.C}")
        if labels.min() < 0 or labels.max() >= self.C:
            bad = int(np.argmax((labels < 0) | (labels >= self.C)))
            raise LabelOutOfRange(
                f"label {int(labels[bad])} at row {bad} outside [0, {self.C})")
        if len(np.unique(labels)) < 2:
            raise InvariantViolation("at least 2 classes must be present")
        emb.flags.writeable = False
        labels.flags.writeable = False

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def D(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True, eq=False)
class CandidateBundle:
    """One source model's exported artifacts for a target set."""

    model_id: str
    source_dataset: str
    architecture: str
    embeddings: np.ndarray                 # (n, D) float64
    source_probs: np.ndarray | None = None  # (n, Z), rows sum to 1
    grad_norm_conv1: float | None = None
    grad_norm_conv2: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        emb = _as_f64(self.embeddings, "embeddings")
        object.__setattr__(self, "embeddings", emb)
        if emb.ndim != 2:
            raise DimensionMismatch(f"embeddings must be 2-D, got shape {emb.shape}")
        n = emb.shape[0]
        if n < 1:
            raise InvariantViolation("bundle must contain at least one row")
        if self.source_probs is not None:
            probs = _as_f64(self.source_probs, "source_probs")
            object.__setattr__(self, "source_probs", probs)
            if probs.ndim != 2 or probs.shape[0] != n:
                raise DimensionMismatch(
                    f"source_probs shape {probs.shape} does not match n={n}")
            if (probs < 0).any():
                i, z = np.argwhere(probs < 0)[0]
                raise InvariantViolation(
                    f"source_probs[{i},{z}] = {probs[i, z]} is negative")
            sums = probs.sum(axis=1)
            off = np.abs(sums - 1.0)
            if (off > _PROB_ROW_TOL).any():
                i = int(np.argmax(off))
                raise InvariantViolation(
                    f"source_probs row {i} sums to {sums[i]:.8f}, expected 1")
            probs.flags.writeable = False
        norms = (self.grad_norm_conv1, self.grad_norm_conv2)
        if (norms[0] is None) != (norms[1] is None):
            raise InvariantViolation("grad norms must be both present or both absent")
        for tag, g in zip(("conv1", "conv2"), norms):
            if g is not None:
                if not math.isfinite(g):
                    raise InvariantViolation(f"grad_norm_{tag} = {g} is not finite")
                if g <= 0:
                    raise InvariantViolation(f"grad_norm_{tag} = {g} must be > 0")
        emb.flags.writeable = False

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def D(self) -> int:
        return self.embeddings.shape[1]

    @property
    def has_grad_norms(self) -> bool:
        return self.grad_norm_conv1 is not None


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Transferability scores of one metric over a candidate pool."""

    metric_name: str
    scores: dict            # model_id -> float
    components: dict | None = None  # model_id -> {"s_lp": .., "s_fu": ..}
    mode: str = "in_domain"

    def __post_init__(self):
        for mid, v in self.scores.items():
            if not math.isfinite(v):
                raise NonFiniteValue(f"score for {mid!r} is {v}")
        if self.mode not in ("in_domain", "cross_domain"):
            raise InvariantViolation(f"unknown mode {self.mode!r}")
        if self.components is not None:
            missing = set(self.scores) - set(self.components)
            if missing:
                raise InvariantViolation(
                    f"components missing for {sorted(missing)}")

    def argmax_model(self) -> str:
        """Highest-scoring model id; ties broken by lexicographic id."""
        return max(sorted(self.scores), key=lambda m: self.scores[m])

    def to_json_dict(self) -> dict:
        out = {
            "schema_version": 1,
            "metric": self.metric_name,
            "mode": self.mode,
            "scores": {k: self.scores[k] for k in sorted(self.scores)},
        }
        if self.components is not None:
            out["components"] = {
                k: self.components[k] for k in sorted(self.components)}
        out["argmax"] = self.argmax_model()
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "ScoreTable":
        return cls(metric_name=d["metric"], scores=dict(d["scores"]),
                   components=d.get("components"), mode=d.get("mode", "in_domain"))


@dataclass(frozen=True, eq=False)
class GroundTruthTable:
    """Source x target matrix of fine-tuned test AUC x 100; NaN = missing."""

    rows: tuple    # source identifiers
    columns: tuple  # target identifiers
    values: np.ndarray  # (len(rows), len(columns)) float64, NaN where missing

    def __post_init__(self):
        rows = tuple(self.rows)
        cols = tuple(self.columns)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "columns", cols)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if len(set(rows)) != len(rows):
            raise DuplicateIdentifier("duplicate source identifier")
        if len(set(cols)) != len(cols):
            raise DuplicateIdentifier("duplicate target identifier")
        if vals.shape != (len(rows), len(cols)):
            raise DimensionMismatch(
                f"values shape {vals.shape} != ({len(rows)}, {len(cols)})")
        present = vals[~np.isnan(vals)]
        if present.size and (present.min() < 0 or present.max() > 100):
            raise ValueOutOfRange("AUC x 100 values must lie in [0, 100]")
        vals.flags.writeable = False

    def get(self, source: str, target: str) -> float | None:
        v = self.values[self.rows.index(source), self.columns.index(target)]
        return None if np.isnan(v) else float(v)

    def column(self, target: str) -> dict:
        """Present values of one target column, keyed by source."""
        j = self.columns.index(target)
        return {r: float(v) for r, v in zip(self.rows, self.values[:, j])
                if not np.isnan(v)}

    def best_source(self, target: str) -> tuple:
        col = self.column(target)
        best = max(sorted(col), key=lambda s: col[s])
        return best, col[best]

    def n_missing(self) -> int:
        return int(np.isnan(self.values).sum())


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Rank-evaluation results over targets x metrics."""

    targets: tuple
    metrics: tuple
    per_target_tau: dict     # (target, metric) -> float | None
    ordinal_ranks: dict      # (target, metric) -> rank (1..K)
    avg_ranks: dict          # metric -> float
    friedman_chi2: float
    friedman_p: float
    critical_difference: float
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        K = len(self.metrics)
        # Ranks are 1..K; ties in average mode may yield half-integers, but
        # every valid ranking preserves the row sum K(K+1)/2.
        for t in self.targets:
            ranks = [self.ordinal_ranks[(t, m)] for m in self.metrics]
            if any(r < 1 or r > K for r in ranks):
                raise InvariantViolation(
                    f"rank outside [1, {K}] for target {t!r}")
            if abs(sum(ranks) - K * (K + 1) / 2) > 1e-9:
                raise InvariantViolation(
                    f"ranks for target {t!r} do not sum to {K * (K + 1) // 2}")
        for m in self.metrics:
            mean = sum(self.ordinal_ranks[(t, m)] for t in self.targets) / len(self.targets)
            if abs(mean - self.avg_ranks[m]) > 1e-9:
                raise InvariantViolation(
                    f"avg rank for {m!r} is {self.avg_ranks[m]}, column mean is {mean}")

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "targets": list(self.targets),
            "metrics": list(self.metrics),
            "per_target_tau": {
                t: {m: self.per_target_tau[(t, m)] for m in self.metrics}
                for t in self.targets},
            "ordinal_ranks": {
                t: {m: self.ordinal_ranks[(t, m)] for m in self.metrics}
                for t in self.targets},
            "avg_ranks": {m: self.avg_ranks[m] for m in self.metrics},
            "friedman_chi2": self.friedman_chi2,
            "friedman_p": self.friedman_p,
            "critical_difference": self.critical_difference,
            "config": self.config,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        targets = tuple(d["targets"])
        metrics = tuple(d["metrics"])
        return cls(
            targets=targets,
            metrics=metrics,
            per_target_tau={(t, m): d["per_target_tau"][t][m]
                            for t in targets for m in metrics},
            ordinal_ranks={(t, m): d["ordinal_ranks"][t][m]
                           for t in targets for m in metrics},
            avg_ranks=dict(d["avg_ranks"]),
            friedman_chi2=d["friedman_chi2"],
            friedman_p=d["friedman_p"],
            critical_difference=d["critical_difference"],
            config=d.get("config", {}),
        )


# --- binary container --------------------------------------------------------

_HEADER = struct.Struct("<4sIQQQI")


def _write_container(path, *, embeddings, labels=None, source_probs=None,
                     grad_norms=None, meta=None):
    emb = np.ascontiguousarray(embeddings, dtype="<f8")
    n, D = emb.shape
    Z = 0 if source_probs is None else source_probs.shape[1]
    flags = 0
    if labels is not None:
        flags |= _FLAG_LABELS
    if grad_norms is not None:
        flags |= _FLAG_GRADNORMS
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, n, D, Z, flags))
            if labels is not None:
                fh.write(np.ascontiguousarray(labels, dtype="<i8").tobytes())
            fh.write(emb.tobytes())
            if source_probs is not None:
                fh.write(np.ascontiguousarray(source_probs, dtype="<f8").tobytes())
            if grad_norms is not None:
                fh.write(struct.pack("<dd", *grad_norms))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    if meta is not None:
        meta_path = path.with_name(path.name + ".meta.json")
        try:
            meta_path.write_text(
                json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise IoError(f"cannot write {meta_path}: {e}") from e


def _read_container(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(blob) < _HEADER.size:
        raise MalformedHeader(f"{path}: file shorter than header ({len(blob)} bytes)")
    magic, version, n, D, Z, flags = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise MalformedHeader(f"{path}: unsupported format version {version}")
    off = _HEADER.size
    labels = None
    if flags & _FLAG_LABELS:
        need = n * 8
        if len(blob) - off < need:
            raise DimensionMismatch(
                f"{path}: labels truncated at byte {len(blob)} (need {off + need})")
        labels = np.frombuffer(blob, dtype="<i8", count=n, offset=off).copy()
        off += need
    need = n * D * 8
    if len(blob) - off < need:
        raise DimensionMismatch(
            f"{path}: embeddings truncated at byte {len(blob)} (need {off + need})")
    emb = np.frombuffer(blob, dtype="<f8", count=n * D, offset=off).reshape(n, D).copy()
    off += need
    probs = None
    if Z > 0:
        need = n * Z * 8
        if len(blob) - off < need:
            raise DimensionMismatch(
                f"{path}: source_probs truncated at byte {len(blob)} (need {off + need})")
        probs = np.frombuffer(blob, dtype="<f8", count=n * Z, offset=off).reshape(n, Z).copy()
        off += need
    norms = None
    if flags & _FLAG_GRADNORMS:
        if len(blob) - off < 16:
            raise DimensionMismatch(f"{path}: grad norms truncated")
        norms = struct.unpack_from("<dd", blob, off)
        off += 16
    if off != len(blob):
        raise DimensionMismatch(
            f"{path}: {len(blob) - off} unexpected trailing bytes")
    meta = {}
    meta_path = path.with_name(path.name + ".meta.json")
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(f"cannot parse {meta_path}: {e}") from e
    return emb, labels, probs, norms, meta


def save_bundle(bundle: CandidateBundle, path) -> None:
    """Write a validated bundle plus its metadata sidecar."""
    meta = {
        "model_id": bundle.model_id,
        "source_dataset": bundle.source_dataset,
        "architecture": bundle.architecture,
        "provenance": bundle.provenance,
    }
    norms = None
    if bundle.has_grad_norms:
        norms = (bundle.grad_norm_conv1, bundle.grad_norm_conv2)
    _write_container(path, embeddings=bundle.embeddings,
                     source_probs=bundle.source_probs, grad_norms=norms, meta=meta)


def load_bundle(path) -> CandidateBundle:
    """Read and validate a candidate bundle."""
    emb, _labels, probs, norms, meta = _read_container(path)
    g1, g2 = norms if norms is not None else (None, None)
    return CandidateBundle(
        model_id=meta.get("model_id", Path(path).stem),
        source_dataset=meta.get("source_dataset", ""),
        architecture=meta.get("architecture", ""),
        embeddings=emb,
        source_probs=probs,
        grad_norm_conv1=g1,
        grad_norm_conv2=g2,
        provenance=meta.get("provenance", {}),
    )


def save_target_set(target: TargetSet, path) -> None:
    """Write a target set (labels + embeddings) in the shared container."""
    meta = {"model_id": target.name, "class_count": target.C}
    _write_container(path, embeddings=target.embeddings, labels=target.labels,
                     meta=meta)


def load_target_set(path) -> TargetSet:
    """Read and validate a target set file."""
    emb, labels, _probs, _norms, meta = _read_container(path)
    if labels is None:
        raise MalformedHeader(f"{path}: target set file carries no labels")
    C = meta.get("class_count")
    if C is None:
        C = int(labels.max()) + 1 if labels.size else 0
    return TargetSet(name=meta.get("model_id", Path(path).stem),
                     embeddings=emb, labels=labels, C=int(C))


# --- CSV tables ---------------------------------------------------------------

def _parse_table_csv(path, *, lo: float, hi: float, what: str):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    columns = [c.strip() for c in header[1:]]
    if not columns:
        raise ParseError(f"{path}: header has no value columns")
    if len(set(columns)) != len(columns):
        raise DuplicateIdentifier(f"{path}: duplicate column identifier")
    rows, data = [], []
    seen = set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        name = rec[0].strip()
        if name in seen:
            raise DuplicateIdentifier(f"{path}:{lineno}: duplicate row {name!r}")
        seen.add(name)
        cells = rec[1:]
        if len(cells) != len(columns):
            raise ParseError(
                f"{path}:{lineno}: expected {len(columns)} cells, got {len(cells)}")
        vals = []
        for col, cell in zip(columns, cells):
            cell = cell.strip()
            if cell in ("", "-"):
                vals.append(np.nan)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}: cannot parse {what} cell {cell!r} "
                    f"in column {col!r}") from None
            if not (lo <= v <= hi):
                raise ValueOutOfRange(
                    f"{path}:{lineno}: {what} value {v} in column {col!r} "
                    f"outside [{lo}, {hi}]")
            vals.append(v)
        rows.append(name)
        data.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return rows, columns, np.array(data, dtype=np.float64)


def load_ground_truth(path) -> GroundTruthTable:
    """Parse a source x target AUC x 100 CSV; blank cells mean missing."""
    rows, columns, values = _parse_table_csv(path, lo=0.0, hi=100.0, what="AUC")
    return GroundTruthTable(rows=tuple(rows), columns=tuple(columns), values=values)


def save_ground_truth(table: GroundTruthTable, path) -> None:
    lines = ["source," + ",".join(table.columns)]
    for r, row in zip(table.rows, table.values):
        cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
        lines.append(",".join([r] + cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_metric_table(path) -> tuple:
    """Parse a target x metric rank-correlation CSV.

    Returns (targets, metrics, values) with NaN marking absent cells;
    values are validated against the [-1, 1] range.
    """
    rows, columns, values = _parse_table_csv(path, lo=-1.0, hi=1.0, what="tau")
    return rows, columns, values
