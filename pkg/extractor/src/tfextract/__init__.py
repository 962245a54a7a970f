"""Adapter from real pre-trained vision models to candidate bundles.

Feeds the transferability scorer: embeds a labeled image folder with a
torchvision model, captures head probabilities when a head exists, and
records conv1/conv2 weight-gradient norms from one triplet-loss
backward pass, all written in the scorer's bundle container format.
"""

from .bundle_io import BundleReport, verify_bundle, write_bundle
from .datasets import FolderDataset, load_image_folder
from .errors import (
    DatasetError,
    ExtractError,
    InvariantViolation,
    MalformedHeader,
    NoValidTriplet,
    ShapeProbeError,
    UnknownArchitecture,
)
from .extract import (
    REDUCTION_MEAN_ALL,
    REDUCTION_MEAN_NONZERO,
    TripletConfig,
    build_model,
    extract_bundle,
    sample_triplets,
    triplet_loss,
)
from .layer_maps import LAYER_MAPS, ArchLayerMap, get_layer_map, validate_map

__all__ = [
    "ArchLayerMap",
    "BundleReport",
    "DatasetError",
    "ExtractError",
    "FolderDataset",
    "InvariantViolation",
    "LAYER_MAPS",
    "MalformedHeader",
    "NoValidTriplet",
    "REDUCTION_MEAN_ALL",
    "REDUCTION_MEAN_NONZERO",
    "ShapeProbeError",
    "TripletConfig",
    "UnknownArchitecture",
    "build_model",
    "extract_bundle",
    "get_layer_map",
    "load_image_folder",
    "sample_triplets",
    "triplet_loss",
    "validate_map",
    "verify_bundle",
    "write_bundle",
]

__version__ = "0.1.0"
