"""Desk-scale CNN with hand-written forward/backward, synthetic data, and
a fine-tuning oracle.

The fixed topology is 3x32x32 -> conv1(8, 3x3, pad 1) -> ReLU ->
maxpool 2x2 -> conv2(16, 3x3, pad 1) -> ReLU -> global average pool ->
16-d embedding -> optional linear head. Convolutions run as im2col
matrix products so training stays fast without any ML framework, and
the analytic gradients are exact, which the finite-difference tests
rely on.

The synthetic generator mixes Gabor-like textures with Gaussian blobs;
class identity shows up in orientation, blob size, and channel tint,
all of which survive global average pooling. `make_micro_zoo` wires
everything into candidate bundles plus a fine-tuned ground-truth table
so the full scoring pipeline can be exercised end to end.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._stats import rank_average
from .data import CandidateBundle, GroundTruthTable, TargetSet
from .errors import (
    ConfigError,
    DegenerateInput,
    Divergence,
    LabelOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
    StaleCache,
)
from .score import TripletConfig, sample_triplets, triplet_loss_and_embedding_grads

IMAGE_SHAPE = (3, 32, 32)
EMBED_DIM = 16
_C1_OUT, _C1_IN = 8, 3
_C2_OUT, _C2_IN = 16, 8


# --- network ------------------------------------------------------------------

def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MicroNet:
    """Parameters of the fixed two-conv topology; all float64."""

    conv1_w: np.ndarray                 # (8, 3, 3, 3)
    conv1_b: np.ndarray                 # (8,)
    conv2_w: np.ndarray                 # (16, 8, 3, 3)
    conv2_b: np.ndarray                 # (16,)
    head_w: np.ndarray | None = None    # (Z, 16)
    head_b: np.ndarray | None = None    # (Z,)

    def __post_init__(self):
        object.__setattr__(self, "conv1_w", _frozen(self.conv1_w))
        object.__setattr__(self, "conv1_b", _frozen(self.conv1_b))
        object.__setattr__(self, "conv2_w", _frozen(self.conv2_w))
        object.__setattr__(self, "conv2_b", _frozen(self.conv2_b))
        if self.conv1_w.shape != (_C1_OUT, _C1_IN, 3, 3):
            raise ShapeMismatch(f"conv1 weights shape {self.conv1_w.shape}")
        if self.conv1_b.shape != (_C1_OUT,):
            raise ShapeMismatch(f"conv1 bias shape {self.conv1_b.shape}")
        if self.conv2_w.shape != (_C2_OUT, _C2_IN, 3, 3):
            raise ShapeMismatch(f"conv2 weights shape {self.conv2_w.shape}")
        if self.conv2_b.shape != (_C2_OUT,):
            raise ShapeMismatch(f"conv2 bias shape {self.conv2_b.shape}")
        if (self.head_w is None) != (self.head_b is None):
            raise ShapeMismatch("head weights and bias must come together")
        if self.head_w is not None:
            object.__setattr__(self, "head_w", _frozen(self.head_w))
            object.__setattr__(self, "head_b", _frozen(self.head_b))
            if self.head_w.ndim != 2 or self.head_w.shape[1] != EMBED_DIM:
                raise ShapeMismatch(f"head weights shape {self.head_w.shape}")
            if self.head_b.shape != (self.head_w.shape[0],):
                raise ShapeMismatch(f"head bias shape {self.head_b.shape}")
        for arr in self.parameters().values():
            if not np.isfinite(arr).all():
                raise NonFiniteValue("network parameters must be finite")

    @property
    def has_head(self) -> bool:
        return self.head_w is not None

    @property
    def head_classes(self) -> int | None:
        return None if self.head_w is None else int(self.head_w.shape[0])

    def parameters(self) -> dict:
        out = {"conv1_w": self.conv1_w, "conv1_b": self.conv1_b,
               "conv2_w": self.conv2_w, "conv2_b": self.conv2_b}
        if self.has_head:
            out["head_w"] = self.head_w
            out["head_b"] = self.head_b
        return out


@dataclass(frozen=True, eq=False)
class MicroNetGrads:
    """Parameter gradients; head entries are None for embedding losses."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None

    def weight_grad_norms(self) -> tuple[float, float]:
        """L2 norms of the conv weight gradients (biases excluded)."""
        return (float(np.linalg.norm(self.conv1_w)),
                float(np.linalg.norm(self.conv2_w)))


def init_micronet(seed: int = 0, head_classes: int | None = None) -> MicroNet:
    """He-style Gaussian init, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    c1 = rng.normal(0.0, math.sqrt(2.0 / 27.0), size=(_C1_OUT, _C1_IN, 3, 3))
    c2 = rng.normal(0.0, math.sqrt(2.0 / 72.0), size=(_C2_OUT, _C2_IN, 3, 3))
    head_w = head_b = None
    if head_classes is not None:
        if head_classes < 2:
            raise ConfigError(f"head needs >= 2 classes, got {head_classes}")
        head_w = rng.normal(0.0, 0.25, size=(head_classes, EMBED_DIM))
        head_b = np.zeros(head_classes)
    return MicroNet(conv1_w=c1, conv1_b=np.zeros(_C1_OUT),
                    conv2_w=c2, conv2_b=np.zeros(_C2_OUT),
                    head_w=head_w, head_b=head_b)


# --- conv primitives ----------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(n, C, H, W) -> (n, H*W, C*9) patch matrix for a 3x3 pad-1 conv."""
    n, C, H, W = x.shape
    xpad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xpad, (3, 3), axis=(2, 3))     # (n,C,H,W,3,3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, H * W, C * 9)


def _conv_forward(cols: np.ndarray, w: np.ndarray, b: np.ndarray,
                  hw: tuple) -> np.ndarray:
    n = cols.shape[0]
    O = w.shape[0]
    out = cols @ w.reshape(O, -1).T + b
    return out.transpose(0, 2, 1).reshape(n, O, *hw)


def _conv_backward(cols: np.ndarray, w: np.ndarray, d_out: np.ndarray,
                   in_shape: tuple):
    """Returns (dW, db, dX) for the conv whose im2col matrix is `cols`."""
    n, O, H, W = d_out.shape
    C = in_shape[1]
    d_mat = d_out.reshape(n, O, H * W).transpose(0, 2, 1)     # (n, HW, O)
    dW = (d_mat.reshape(-1, O).T @ cols.reshape(-1, C * 9)).reshape(O, C, 3, 3)
    db = d_out.sum(axis=(0, 2, 3))
    d_cols = d_mat @ w.reshape(O, -1)                          # (n, HW, C*9)
    d_cols = d_cols.reshape(n, H, W, C, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    d_xpad = np.zeros((n, C, H + 2, W + 2))
    for u in range(3):
        for v in range(3):
            d_xpad[:, :, u:u + H, v:v + W] += d_cols[:, :, :, :, u, v]
    return dW, db, d_xpad[:, :, 1:-1, 1:-1]


def _maxpool_forward(x: np.ndarray):
    n, C, H, W = x.shape
    tiles = x.reshape(n, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(tiles).reshape(n, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)     # first maximum wins on ties
    pooled = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def _maxpool_backward(d_pool: np.ndarray, idx: np.ndarray, in_shape: tuple):
    n, C, H, W = in_shape
    flat = np.zeros((n, C, H // 2, W // 2, 4))
    np.put_along_axis(flat, idx[..., None], d_pool[..., None], axis=-1)
    tiles = flat.reshape(n, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return tiles.reshape(n, C, H, W)


# --- forward / backward ---------------------------------------------------------

@dataclass(eq=False)
class ForwardCache:
    """Pre-activations and patch matrices retained for the backward pass."""

    net: MicroNet
    x_shape: tuple
    cols1: np.ndarray
    pre1: np.ndarray
    pool_idx: np.ndarray
    cols2: np.ndarray
    pre2: np.ndarray
    emb: np.ndarray


def forward(net: MicroNet, images: np.ndarray):
    """Run the net; returns (embeddings, logits or None, cache).

    Pure and deterministic: repeated calls on the same inputs are
    bit-identical.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
        raise ShapeMismatch(
            f"images must have shape (n, 3, 32, 32), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeMismatch("need at least one image")
    if not np.isfinite(x).all():
        raise NonFiniteValue("images contain non-finite values")

    cols1 = _im2col(x)
    pre1 = _conv_forward(cols1, net.conv1_w, net.conv1_b, (32, 32))
    relu1 = np.maximum(pre1, 0.0)
    pooled, pool_idx = _maxpool_forward(relu1)
    cols2 = _im2col(pooled)
    pre2 = _conv_forward(cols2, net.conv2_w, net.conv2_b, (16, 16))
    relu2 = np.maximum(pre2, 0.0)
    emb = relu2.mean(axis=(2, 3))
    logits = emb @ net.head_w.T + net.head_b if net.has_head else None
    cache = ForwardCache(net=net, x_shape=x.shape, cols1=cols1, pre1=pre1,
                         pool_idx=pool_idx, cols2=cols2, pre2=pre2, emb=emb)
    return emb, logits, cache


def _backward(net: MicroNet, cache: ForwardCache, d_emb: np.ndarray,
              d_logits: np.ndarray | None) -> MicroNetGrads:
    if cache.net is not net:
        raise StaleCache("cache was produced by a different network")
    n = cache.x_shape[0]
    head_w_g = head_b_g = None
    if d_logits is not None:
        head_w_g = d_logits.T @ cache.emb
        head_b_g = d_logits.sum(axis=0)
        d_emb = d_emb + d_logits @ net.head_w
    # global average pool spreads the gradient uniformly
    d_relu2 = np.broadcast_to(
        d_emb[:, :, None, None] / 256.0, (n, _C2_OUT, 16, 16))
    d_pre2 = np.where(cache.pre2 > 0.0, d_relu2, 0.0)
    d_w2, d_b2, d_pooled = _conv_backward(
        cache.cols2, net.conv2_w, d_pre2, (n, _C2_IN, 16, 16))
    d_relu1 = _maxpool_backward(d_pooled, cache.pool_idx, (n, _C1_OUT, 32, 32))
    d_pre1 = np.where(cache.pre1 > 0.0, d_relu1, 0.0)
    d_w1, d_b1, _ = _conv_backward(
        cache.cols1, net.conv1_w, d_pre1, (n, _C1_IN, 32, 32))
    return MicroNetGrads(conv1_w=d_w1, conv1_b=d_b1, conv2_w=d_w2,
                         conv2_b=d_b2, head_w=head_w_g, head_b=head_b_g)


def backward_from_embedding_grads(net: MicroNet, cache: ForwardCache,
                                  d_emb: np.ndarray) -> MicroNetGrads:
    """Exact conv gradients of any scalar loss with embedding-gradient d_emb."""
    d_emb = np.asarray(d_emb, dtype=np.float64)
    if d_emb.shape != (cache.x_shape[0], EMBED_DIM):
        raise ShapeMismatch(
            f"embedding gradient shape {d_emb.shape} does not match cache")
    return _backward(net, cache, d_emb, None)


def backward_from_logit_grads(net: MicroNet, cache: ForwardCache,
                              d_logits: np.ndarray) -> MicroNetGrads:
    """Gradients for a loss on the head logits (head gradients included)."""
    if not net.has_head:
        raise ConfigError("network has no head")
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != (cache.x_shape[0], net.head_classes):
        raise ShapeMismatch(
            f"logit gradient shape {d_logits.shape} does not match cache")
    zero = np.zeros((cache.x_shape[0], EMBED_DIM))
    return _backward(net, cache, zero, d_logits)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its logit gradient."""
    n, Z = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0 or y.max() >= Z:
        raise LabelOutOfRange(f"labels must lie in [0, {Z})")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float((lse - logits[np.arange(n), y]).mean())
    probs = np.exp(logits - lse[:, None])
    probs[np.arange(n), y] -= 1.0
    return loss, probs / n


def softmax_probs(net: MicroNet, images: np.ndarray) -> np.ndarray:
    """Head softmax probabilities; requires a head."""
    if not net.has_head:
        raise ConfigError("network has no head")
    _, logits, _ = forward(net, images)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


# --- synthetic data -------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the texture-plus-blob class generator.

    Classes differ in Gabor orientation, blob radius, blob center, and
    channel tint, all derived from the class index and angle_offset, so
    two specs with different offsets produce genuinely different class
    structure.
    """

    n: int
    class_count: int
    texture_strength: float = 1.0
    blob_strength: float = 1.0
    noise_sigma: float = 0.1
    angle_offset: float = 0.0
    frequency: float = 4.0
    center_spread: float = 0.55
    seed: int = 0

    def __post_init__(self):
        if self.n < self.class_count:
            raise ConfigError("need at least one sample per class")
        if self.class_count < 2:
            raise ConfigError("need at least 2 classes")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "GeneratorSpec":
        allowed = {f.name for f in dataclasses.fields(GeneratorSpec)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return GeneratorSpec(**d)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Labeled image tensor plus the spec that generated it."""

    images: np.ndarray      # (n, 3, 32, 32) f64
    labels: np.ndarray      # (n,) int64
    spec: GeneratorSpec

    def __post_init__(self):
        object.__setattr__(self, "images", _frozen(self.images))
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise ShapeMismatch(f"images shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeMismatch("labels do not match image count")
        C = self.spec.class_count
        if self.labels.min() < 0 or self.labels.max() >= C:
            raise LabelOutOfRange(f"labels must lie in [0, {C})")
        counts = np.bincount(self.labels, minlength=C)
        if counts.max() - counts.min() > 1:
            raise DegenerateInput(
                f"class counts {counts.tolist()} not balanced within 1")

    @property
    def n(self) -> int:
        return int(self.images.shape[0])

    @property
    def class_count(self) -> int:
        return self.spec.class_count


_YY, _XX = np.meshgrid(np.linspace(-1.0, 1.0, 32),
                       np.linspace(-1.0, 1.0, 32), indexing="ij")


def _class_params(spec: GeneratorSpec, c: int):
    C = spec.class_count
    phi = 2.0 * math.pi * c / C + spec.angle_offset
    theta = math.pi * c / C + spec.angle_offset
    radius = 0.16 + 0.22 * (c + 1) / C
    center = (spec.center_spread * math.cos(phi),
              spec.center_spread * math.sin(phi))
    tint = 0.5 + 0.5 * np.cos(phi + np.array([0.0, 2.0, 4.0]) * math.pi / 3.0)
    freq = spec.frequency * (1.0 + 0.5 * c / C)
    return theta, freq, radius, center, tint


def make_dataset(spec: GeneratorSpec) -> SyntheticDataset:
    """Generate a balanced synthetic dataset, deterministic in spec.seed."""
    rng = np.random.default_rng(spec.seed)
    envelope = np.exp(-(_XX ** 2 + _YY ** 2) / (2.0 * 0.8 ** 2))
    images = np.empty((spec.n, 3, 32, 32))
    labels = np.empty(spec.n, dtype=np.int64)
    params = [_class_params(spec, c) for c in range(spec.class_count)]
    for i in range(spec.n):
        c = i % spec.class_count
        theta, freq, radius, center, tint = params[c]
        phase = rng.uniform(0.0, 2.0 * math.pi)
        jitter = rng.normal(0.0, 0.05, size=2)
        t = _XX * math.cos(theta) + _YY * math.sin(theta)
        texture = np.cos(2.0 * math.pi * freq * t + phase) * envelope
        blob = np.exp(-(((_XX - center[0] - jitter[0]) ** 2
                         + (_YY - center[1] - jitter[1]) ** 2)
                        / (2.0 * radius ** 2)))
        pattern = (spec.texture_strength * texture
                   + spec.blob_strength * blob)
        noise = rng.normal(0.0, spec.noise_sigma, size=(3, 32, 32))
        images[i] = tint[:, None, None] * pattern + noise
        labels[i] = c
    return SyntheticDataset(images=images, labels=labels, spec=spec)


def target_set_from_dataset(name: str, dataset: SyntheticDataset) -> TargetSet:
    """Expose a synthetic dataset as a TargetSet with pixel features."""
    return TargetSet(name=name,
                     embeddings=dataset.images.reshape(dataset.n, -1),
                     labels=dataset.labels,
                     C=dataset.class_count)


# --- training -------------------------------------------------------------------

def train(net: MicroNet, dataset: SyntheticDataset, epochs: int, lr: float,
          seed: int = 0, batch_size: int = 16):
    """Plain SGD on cross-entropy; returns (trained net, loss trace).

    The trace starts with the pre-training loss, then one entry per
    epoch; a non-finite loss aborts with Divergence.
    """
    if not net.has_head:
        raise ConfigError("training requires a head")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    if dataset.n < 1:
        raise DegenerateInput("training fold is empty")
    y = dataset.labels
    if int(y.max()) >= net.head_classes:
        raise LabelOutOfRange(
            f"dataset has class {int(y.max())} but head width is "
            f"{net.head_classes}")
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in net.parameters().items()}

    def as_net() -> MicroNet:
        return MicroNet(**{k: v.copy() for k, v in params.items()})

    def full_loss(cur: MicroNet) -> float:
        _, logits, _ = forward(cur, dataset.images)
        loss, _ = cross_entropy(logits, y)
        return loss

    current = as_net()
    trace = [full_loss(current)]
    for _epoch in range(epochs):
        order = rng.permutation(dataset.n)
        for start in range(0, dataset.n, batch_size):
            batch = order[start:start + batch_size]
            _, logits, cache = forward(current, dataset.images[batch])
            _loss, d_logits = cross_entropy(logits, y[batch])
            grads = backward_from_logit_grads(current, cache, d_logits)
            params["conv1_w"] -= lr * grads.conv1_w
            params["conv1_b"] -= lr * grads.conv1_b
            params["conv2_w"] -= lr * grads.conv2_w
            params["conv2_b"] -= lr * grads.conv2_b
            params["head_w"] -= lr * grads.head_w
            params["head_b"] -= lr * grads.head_b
            current = as_net()
        epoch_loss = full_loss(current)
        if not math.isfinite(epoch_loss):
            raise Divergence(
                f"training loss became non-finite at epoch {_epoch + 1}")
        trace.append(epoch_loss)
    return current, trace


def accuracy(net: MicroNet, dataset: SyntheticDataset) -> float:
    _, logits, _ = forward(net, dataset.images)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


# --- evaluation -----------------------------------------------------------------

def auc_macro(scores: np.ndarray, labels: np.ndarray) -> float:
    """One-vs-rest macro AUC via average ranks.

    Equals the exhaustive pairwise-comparison count with 0.5 tie credit
    exactly. Classes absent from the fold are skipped; fewer than two
    present classes is an error because AUC is undefined there.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != y.shape[0]:
        raise ShapeMismatch(
            f"scores shape {scores.shape} does not match {y.shape[0]} labels")
    present = np.unique(y)
    if present.size < 2:
        raise DegenerateInput("AUC needs at least two classes in the fold")
    if present.min() < 0 or present.max() >= scores.shape[1]:
        raise LabelOutOfRange("label outside the score columns")
    aucs = []
    for c in present:
        col = scores[:, c]
        pos = col[y == c]
        neg = col[y != c]
        ranks = rank_average(np.concatenate([pos, neg]))
        n_pos, n_neg = len(pos), len(neg)
        auc = (ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        aucs.append(auc)
    return float(np.mean(aucs))


@dataclass(frozen=True)
class SplitSpec:
    """Stratified train/val/test fractions; test takes the remainder."""

    train_frac: float = 0.6
    val_frac: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.train_frac and 0.0 < self.val_frac
                and self.train_frac + self.val_frac < 1.0):
            raise ConfigError(
                f"invalid split fractions {self.train_frac}/{self.val_frac}")


@dataclass(frozen=True)
class HyperGrid:
    """Fine-tuning search space: three learning rates, two epoch budgets."""

    learning_rates: tuple = (1e-1, 1e-2, 1e-3)
    epochs: tuple = (2, 6)
    batch_size: int = 16

    def __post_init__(self):
        if len(self.learning_rates) < 1 or len(self.epochs) < 1:
            raise ConfigError("hyper grid must be non-empty")


def stratified_split(labels: np.ndarray, split: SplitSpec, seed: int):
    """Per-class shuffled index split; keeps every class in every fold
    when counts allow."""
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    tr, va, te = [], [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        n_c = len(idx)
        # every class keeps at least one test sample; tiny classes give
        # up their train/val share first
        n_tr = min(max(1, int(round(split.train_frac * n_c))),
                   max(n_c - 2, 0))
        n_va = min(max(1, int(round(split.val_frac * n_c))),
                   max(n_c - n_tr - 1, 0))
        tr.extend(idx[:n_tr])
        va.extend(idx[n_tr:n_tr + n_va])
        te.extend(idx[n_tr + n_va:])
    return (np.sort(np.array(tr)), np.sort(np.array(va)),
            np.sort(np.array(te)))


def _subset(dataset: SyntheticDataset, idx: np.ndarray) -> SyntheticDataset:
    # folds inherit the parent's generator spec for provenance; the
    # balance invariant is enforced by stratification, so bypass the
    # constructor check by rebuilding only when balanced
    images = dataset.images[idx]
    labels = dataset.labels[idx]
    return _RawSubset(images=images, labels=labels, spec=dataset.spec)


@dataclass(frozen=True, eq=False)
class _RawSubset(SyntheticDataset):
    """Fold view of a dataset; skips the balance invariant, which only
    the full generated dataset must satisfy."""

    def __post_init__(self):
        object.__setattr__(self, "images", _frozen(self.images))
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)


def fine_tune_auc(source_net: MicroNet, target: SyntheticDataset,
                  split_spec: SplitSpec | None = None,
                  hyper_grid: HyperGrid | None = None,
                  seed: int = 0) -> float:
    """Ground-truth transfer quality: full fine-tuning with a small grid
    search, model selection by validation loss, macro test AUC."""
    split_spec = split_spec or SplitSpec()
    hyper_grid = hyper_grid or HyperGrid()
    C = target.class_count
    if C < 2:
        raise DegenerateInput("target needs at least 2 classes")
    rng = np.random.default_rng(seed)
    head_w = rng.normal(0.0, 0.25, size=(C, EMBED_DIM))
    start = MicroNet(conv1_w=source_net.conv1_w, conv1_b=source_net.conv1_b,
                     conv2_w=source_net.conv2_w, conv2_b=source_net.conv2_b,
                     head_w=head_w, head_b=np.zeros(C))
    idx_tr, idx_va, idx_te = stratified_split(target.labels, split_spec, seed)
    train_fold = _subset(target, idx_tr)
    val_images = target.images[idx_va]
    val_labels = target.labels[idx_va]

    best = None
    for lr in hyper_grid.learning_rates:
        for epochs in hyper_grid.epochs:
            net, _trace = train(start, train_fold, epochs, lr, seed=seed,
                                batch_size=hyper_grid.batch_size)
            _, logits, _ = forward(net, val_images)
            val_loss, _ = cross_entropy(logits, val_labels)
            if best is None or val_loss < best[0]:
                best = (val_loss, net)
    scores = softmax_probs(best[1], target.images[idx_te])
    return auc_macro(scores, target.labels[idx_te])


# --- zoo ------------------------------------------------------------------------

@dataclass(frozen=True)
class ZooSourceSpec:
    """One zoo entry: a generator plus a pre-training budget.

    epochs=0 keeps the randomly initialized network, giving the zoo a
    no-pretraining control arm.
    """

    name: str
    generator: GeneratorSpec
    epochs: int = 25
    lr: float = 0.05

    def __post_init__(self):
        if not self.name:
            raise ConfigError("source spec needs a name")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("epochs and lr must be >= 0")


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def make_micro_zoo(source_specs, targets, seed: int = 0,
                   triplet_config: TripletConfig | None = None,
                   split_spec: SplitSpec | None = None,
                   hyper_grid: HyperGrid | None = None):
    """Train one micro source per spec and bundle it against each target.

    Returns (bundles, truth): bundles maps target name to a list of
    CandidateBundle (one per source, embeddings + source probs + triplet
    gradient norms), and truth is a sources x targets GroundTruthTable
    of fine-tuned macro AUC in percent.
    """
    specs = list(source_specs)
    if len(specs) < 3:
        raise ConfigError(f"need at least 3 source specs, got {len(specs)}")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("source spec names must be distinct")
    target_map = dict(targets)
    if not target_map:
        raise ConfigError("need at least one target")

    nets = {}
    # common random numbers across sources: one shared init and one
    # shared batch-order seed, so bundles differ only through each
    # source's training data and budget, not through init luck
    init_seed = _derived_seed(seed, 1)
    train_seed = _derived_seed(seed, 2)
    for spec in specs:
        dataset = make_dataset(spec.generator)
        net = init_micronet(seed=init_seed,
                            head_classes=spec.generator.class_count)
        if spec.epochs > 0:
            net, _ = train(net, dataset, spec.epochs, spec.lr,
                           seed=train_seed)
        nets[spec.name] = net

    bundles: dict = {}
    values = np.empty((len(specs), len(target_map)))
    for j, (t_name, t_data) in enumerate(target_map.items()):
        per_target = []
        # per-target (not per-source) seeds: every source faces the same
        # triplets, the same split, and the same head init, so the
        # ground-truth comparison is paired
        cfg = triplet_config or TripletConfig(seed=_derived_seed(seed, 3, j))
        triplets = sample_triplets(t_data.labels, cfg)
        ft_seed = _derived_seed(seed, 4, j)
        for i, spec in enumerate(specs):
            net = nets[spec.name]
            emb, _, cache = forward(net, t_data.images)
            _loss, d_emb = triplet_loss_and_embedding_grads(
                emb, triplets, cfg.margin, cfg.reduction)
            grads = backward_from_embedding_grads(net, cache, d_emb)
            g1, g2 = grads.weight_grad_norms()
            if g1 == 0.0:
                raise DegenerateInput(
                    f"source {spec.name!r} satisfies every triplet margin on "
                    f"target {t_name!r}, so its gradient ratio is undefined; "
                    "use a harder target or a larger margin")
            probs = softmax_probs(net, t_data.images)
            per_target.append(CandidateBundle(
                model_id=spec.name,
                source_dataset=spec.name,
                architecture="micronet",
                embeddings=emb,
                source_probs=probs,
                grad_norm_conv1=g1,
                grad_norm_conv2=g2,
                provenance={"generator": spec.generator.to_dict(),
                            "epochs": spec.epochs, "lr": spec.lr,
                            "zoo_seed": seed}))
            values[i, j] = 100.0 * fine_tune_auc(
                net, t_data, split_spec=split_spec, hyper_grid=hyper_grid,
                seed=ft_seed)
        bundles[t_name] = per_target
    truth = GroundTruthTable(rows=names, columns=list(target_map),
                             values=values)
    return bundles, truth
