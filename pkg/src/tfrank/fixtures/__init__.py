"""Bundled benchmark tables.

Two ground-truth tables give fine-tuned test AUC x 100 for every
source -> target pair of the medical-imaging benchmark (one varying
the source dataset at fixed architecture, one varying the architecture
at fixed source data). Two companion tables give the per-target weighted
rank correlations achieved by seven selection metrics on those pools.
"""

from importlib import resources

from ..data import GroundTruthTable, load_ground_truth, load_metric_table

__all__ = [
    "source_dataset_auc",
    "architecture_auc",
    "tau_source_datasets",
    "tau_architectures",
    "fixture_path",
]


def fixture_path(name: str):
    """Filesystem path of a bundled CSV (context manager not required here)."""
    return resources.files(__package__) / name


def source_dataset_auc() -> GroundTruthTable:
    """15 sources x 11 targets; the 11 self-source cells are missing."""
    return load_ground_truth(fixture_path("source_dataset_auc.csv"))


def architecture_auc() -> GroundTruthTable:
    """9 architectures x 11 targets, fully populated."""
    return load_ground_truth(fixture_path("architecture_auc.csv"))


def tau_source_datasets() -> tuple:
    """(targets, metrics, values) for the source-dataset pool."""
    return load_metric_table(fixture_path("tau_source_datasets.csv"))


def tau_architectures() -> tuple:
    """(targets, metrics, values) for the architecture pool."""
    return load_metric_table(fixture_path("tau_architectures.csv"))
