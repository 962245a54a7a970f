"""Per-architecture layer maps.

Each entry names the classification head (whose input is the
penultimate embedding) and the first two convolution layers in
execution order. The conv choices follow one rule: first and second
``Conv2d`` to fire on a forward pass. For stems that wrap several
convs in a block (shufflenet's first stage, densenet's first dense
layer) that means the second conv can sit inside a block rather than
next to the stem conv.
"""

from __future__ import annotations

import dataclasses

import torch.nn as nn

from .errors import ShapeProbeError, UnknownArchitecture


@dataclasses.dataclass(frozen=True)
class ArchLayerMap:
    """Module paths for one architecture.

    head is None for models that end in the embedding itself
    (classifier stripped); conv1 must execute strictly before conv2.
    """

    architecture: str
    head: str | None
    conv1: str
    conv2: str

    def __post_init__(self):
        if not self.architecture:
            raise UnknownArchitecture("architecture name is empty")
        if not self.conv1 or not self.conv2 or self.conv1 == self.conv2:
            raise ShapeProbeError(
                f"{self.architecture}: conv identifiers must be two "
                f"distinct module paths")


LAYER_MAPS = {
    m.architecture: m for m in (
        ArchLayerMap("resnet18", "fc", "conv1", "layer1.0.conv1"),
        ArchLayerMap("densenet121", "classifier", "features.conv0",
                     "features.denseblock1.denselayer1.conv1"),
        ArchLayerMap("efficientnet_v2_s", "classifier.1", "features.0.0",
                     "features.1.0.block.0.0"),
        ArchLayerMap("mobilenet_v3_small", "classifier.3", "features.0.0",
                     "features.1.block.0.0"),
        ArchLayerMap("googlenet", "fc", "conv1.conv", "conv2.conv"),
        ArchLayerMap("mnasnet1_0", "classifier.1", "layers.0", "layers.3"),
        ArchLayerMap("vgg11", "classifier.6", "features.0", "features.3"),
        ArchLayerMap("convnext_tiny", "classifier.2", "features.0.0",
                     "features.1.0.block.0"),
        ArchLayerMap("shufflenet_v2_x0_5", "fc", "conv1.0",
                     "stage2.0.branch1.0"),
    )
}


def get_layer_map(architecture: str,
                  override: ArchLayerMap | None = None) -> ArchLayerMap:
    """Shipped map for a known architecture, or the caller's override."""
    if override is not None:
        return override
    try:
        return LAYER_MAPS[architecture]
    except KeyError:
        known = ", ".join(sorted(LAYER_MAPS))
        raise UnknownArchitecture(
            f"no layer map for {architecture!r}; known: {known}. "
            f"Pass an explicit ArchLayerMap for anything else.") from None


def resolve_module(model: nn.Module, path: str) -> nn.Module:
    """Fetch a submodule by dotted path, erroring with the path name."""
    try:
        return model.get_submodule(path)
    except AttributeError as e:
        raise ShapeProbeError(f"module path {path!r} not found: {e}") from e


def validate_map(model: nn.Module, layer_map: ArchLayerMap) -> None:
    """Check the map against a real model: convs are convs and fire in
    the promised order on a probe forward."""
    conv1 = resolve_module(model, layer_map.conv1)
    conv2 = resolve_module(model, layer_map.conv2)
    for path, mod in ((layer_map.conv1, conv1), (layer_map.conv2, conv2)):
        if not isinstance(mod, nn.Conv2d):
            raise ShapeProbeError(
                f"{path!r} is {type(mod).__name__}, not Conv2d")
    if layer_map.head is not None:
        head = resolve_module(model, layer_map.head)
        if not isinstance(head, nn.Linear):
            raise ShapeProbeError(
                f"{layer_map.head!r} is {type(head).__name__}, not Linear")
