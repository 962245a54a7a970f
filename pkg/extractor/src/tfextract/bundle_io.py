"""Candidate-bundle container: writer and verifier.

The wire format is the scoring package's documented interchange
format, implemented here against its specification so that bundles
from either producer are interchangeable:

little-endian, magic ``TFRB``, version u32 = 1, then n/D/Z as u64,
flags u32 (bit 0: labels present, bit 1: grad norms present), labels
as n i64 when flagged, embeddings as n*D f64 row-major, source probs
as n*Z f64 when Z > 0, and the two gradient norms as f64 when
flagged. Metadata rides in a ``<name>.meta.json`` sidecar.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, MalformedHeader

_MAGIC = b"TFRB"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQQI")
_FLAG_LABELS = 1
_FLAG_GRADNORMS = 2


def write_bundle(path, *, embeddings: np.ndarray,
                 source_probs: np.ndarray | None,
                 grad_norms: tuple[float, float] | None,
                 meta: dict) -> None:
    """Write one bundle file plus its metadata sidecar."""
    emb = np.ascontiguousarray(embeddings, dtype="<f8")
    if emb.ndim != 2:
        raise InvariantViolation(f"embeddings must be 2d, got {emb.ndim}d")
    n, D = emb.shape
    Z = 0
    flags = 0
    if grad_norms is not None:
        flags |= _FLAG_GRADNORMS
    if source_probs is not None:
        probs = np.ascontiguousarray(source_probs, dtype="<f8")
        if probs.shape[0] != n:
            raise InvariantViolation(
                f"source_probs rows {probs.shape[0]} != n {n}")
        Z = probs.shape[1]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, D, Z, flags))
        fh.write(emb.tobytes())
        if Z > 0:
            fh.write(probs.tobytes())
        if grad_norms is not None:
            fh.write(struct.pack("<dd", *grad_norms))
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n",
                       encoding="utf-8")


@dataclasses.dataclass(frozen=True)
class BundleReport:
    """What verify_bundle found; summary() is the CLI-facing line."""

    path: str
    n: int
    D: int
    Z: int
    has_labels: bool
    grad_norms: tuple[float, float] | None
    meta: dict

    def summary(self) -> str:
        norms = ("none" if self.grad_norms is None
                 else "%.6g / %.6g" % self.grad_norms)
        return (f"{self.path}: OK  n={self.n} D={self.D} Z={self.Z} "
                f"labels={'yes' if self.has_labels else 'no'} norms={norms}")


def verify_bundle(path) -> BundleReport:
    """Re-open a bundle, check header and payload invariants."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise MalformedHeader(
            f"{path}: {len(blob)} bytes is shorter than the header")
    magic, version, n, D, Z, flags = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise MalformedHeader(f"{path}: unsupported version {version}")
    off = _HEADER.size
    has_labels = bool(flags & _FLAG_LABELS)
    expected = (n * 8 if has_labels else 0) + n * D * 8 + n * Z * 8 \
        + (16 if flags & _FLAG_GRADNORMS else 0)
    if len(blob) - off != expected:
        raise MalformedHeader(
            f"{path}: payload is {len(blob) - off} bytes, header promises "
            f"{expected}")
    if has_labels:
        off += n * 8
    emb = np.frombuffer(blob, dtype="<f8", count=n * D, offset=off)
    off += n * D * 8
    if not np.isfinite(emb).all():
        raise InvariantViolation(f"{path}: non-finite embedding values")
    if Z > 0:
        probs = np.frombuffer(blob, dtype="<f8", count=n * Z, offset=off)
        off += n * Z * 8
        if not np.isfinite(probs).all() or (probs < 0).any():
            raise InvariantViolation(f"{path}: source_probs not a "
                                     f"finite non-negative matrix")
        sums = probs.reshape(n, Z).sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise InvariantViolation(f"{path}: source_probs rows do not "
                                     f"sum to 1")
    norms = None
    if flags & _FLAG_GRADNORMS:
        norms = struct.unpack_from("<dd", blob, off)
        if not all(np.isfinite(v) and v >= 0.0 for v in norms):
            raise InvariantViolation(
                f"{path}: gradient norms must be finite and >= 0, "
                f"got {norms}")
    meta = {}
    sidecar = path.with_name(path.name + ".meta.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    return BundleReport(path=str(path), n=n, D=D, Z=Z,
                        has_labels=has_labels, grad_norms=norms, meta=meta)
