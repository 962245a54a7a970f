"""Bundle extraction: one forward pass, one triplet-loss backward.

The model embeds every dataset image (penultimate tap), the head's
softmax provides source probabilities when a head exists, and a single
backward pass of the triplet margin loss over the embeddings yields
the L2 gradient norms of the first two conv layers' weights.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn as nn
import torchvision.models as tv_models

from .bundle_io import write_bundle
from .datasets import FolderDataset
from .errors import NoValidTriplet, ShapeProbeError, UnknownArchitecture
from .layer_maps import ArchLayerMap, get_layer_map, resolve_module, validate_map

REDUCTION_MEAN_ALL = "mean_all"
REDUCTION_MEAN_NONZERO = "mean_nonzero"


@dataclasses.dataclass(frozen=True)
class TripletConfig:
    """Sampling and loss knobs; defaults mirror the scoring package."""

    margin: float = 0.05
    triplets_per_anchor: int = 1
    seed: int = 0
    reduction: str = REDUCTION_MEAN_NONZERO


def sample_triplets(y, cfg: TripletConfig | None = None) -> list:
    """Seeded (anchor, positive, negative) triples.

    Reproduces the scoring package's documented rule: anchors ascend by
    index, each eligible anchor draws triplets_per_anchor (positive,
    negative) pairs, positives uniform over classmates, negatives
    uniform over the rest, all from one default_rng(seed) stream.
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
            q = int(other[rng.integers(len(other))])
            triplets.append((a, p, q))
    return triplets


def triplet_loss(emb: torch.Tensor, triplets, margin: float,
                 reduction: str = REDUCTION_MEAN_NONZERO) -> torch.Tensor:
    """Triplet margin loss on an embedding matrix, autodiff-ready.

    Per triplet max(||x_a - x_p|| - ||x_a - x_n|| + margin, 0);
    inactive triplets contribute nothing, and the denominator counts
    active triplets under mean_nonzero or all of them under mean_all.
    """
    idx = torch.as_tensor(triplets, dtype=torch.long, device=emb.device)
    a, p, q = idx[:, 0], idx[:, 1], idx[:, 2]
    d_ap = torch.linalg.vector_norm(emb[a] - emb[p], dim=1)
    d_an = torch.linalg.vector_norm(emb[a] - emb[q], dim=1)
    per = torch.clamp(d_ap - d_an + margin, min=0.0)
    active = per > 0
    if reduction == REDUCTION_MEAN_ALL:
        count = idx.shape[0]
    else:
        count = int(active.sum())
    if count == 0:
        return emb.sum() * 0.0
    return per[active].sum() / count


def build_model(architecture: str, weights_path=None,
                init_seed: int = 0) -> nn.Module:
    """Construct a torchvision model by name.

    Without a weights file the parameters are seeded-random (this tool
    never downloads); with one, the state dict is loaded strictly.
    """
    try:
        ctor = getattr(tv_models, architecture)
    except AttributeError:
        raise UnknownArchitecture(
            f"torchvision has no model builder {architecture!r}") from None
    torch.manual_seed(init_seed)
    kwargs = {"init_weights": True} if architecture == "googlenet" else {}
    model = ctor(weights=None, **kwargs)
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu",
                           weights_only=True)
        model.load_state_dict(state)
    return model.eval()


def _forward_embeddings(model: nn.Module, layer_map: ArchLayerMap,
                        images: torch.Tensor, batch_size: int):
    """Batched forward keeping the autograd graph; returns embeddings
    (n x D, graph-connected) and detached softmax probs or None."""
    captured = []
    hook = None
    if layer_map.head is not None:
        head = resolve_module(model, layer_map.head)
        hook = head.register_forward_pre_hook(
            lambda mod, args: captured.append(args[0]))
    try:
        emb_parts, prob_parts = [], []
        for start in range(0, images.shape[0], batch_size):
            batch = images[start:start + batch_size]
            out = model(batch)
            if layer_map.head is None:
                emb_parts.append(torch.flatten(out, start_dim=1))
            else:
                if not captured:
                    raise ShapeProbeError(
                        f"head {layer_map.head!r} never fired on forward")
                emb_parts.append(torch.flatten(captured.pop(), start_dim=1))
                prob_parts.append(torch.softmax(out.detach(), dim=1))
    finally:
        if hook is not None:
            hook.remove()
    embeddings = torch.cat(emb_parts)
    probs = torch.cat(prob_parts) if prob_parts else None
    return embeddings, probs


def extract_bundle(model: nn.Module, dataset: FolderDataset,
                   cfg: TripletConfig, out_path, *,
                   architecture: str, model_id: str | None = None,
                   source_dataset: str = "unknown",
                   layer_map: ArchLayerMap | None = None,
                   batch_size: int = 16) -> "BundleReport":
    """Extract and write one candidate bundle; returns its verification
    report (the file is re-read and checked after writing)."""
    from .bundle_io import verify_bundle

    lm = get_layer_map(architecture, layer_map)
    validate_map(model, lm)
    # frozen layers (requires_grad off) stay frozen: a zero norm is the
    # honest output and the scorer rejects it at ratio time
    model.eval()
    model.zero_grad(set_to_none=True)

    embeddings, probs = _forward_embeddings(model, lm, dataset.images,
                                            batch_size)
    triplets = sample_triplets(dataset.labels, cfg)
    loss = triplet_loss(embeddings, triplets, cfg.margin, cfg.reduction)
    loss.backward()

    norms = []
    for path in (lm.conv1, lm.conv2):
        weight = resolve_module(model, path).weight
        grad = weight.grad
        norms.append(0.0 if grad is None
                     else float(torch.linalg.vector_norm(grad)))
    meta = {
        "model_id": model_id or architecture,
        "source_dataset": source_dataset,
        "architecture": architecture,
        "provenance": {
            "producer": "tfextract",
            "margin": cfg.margin,
            "triplets_per_anchor": cfg.triplets_per_anchor,
            "seed": cfg.seed,
            "reduction": cfg.reduction,
            "n_triplets": len(triplets),
            "n_images": int(dataset.n),
            "classes": list(dataset.class_names),
        },
    }
    write_bundle(out_path,
                 embeddings=embeddings.detach().numpy().astype(np.float64),
                 source_probs=None if probs is None
                 else probs.numpy().astype(np.float64),
                 grad_norms=(norms[0], norms[1]),
                 meta=meta)
    return verify_bundle(out_path)
