"""Transferability scoring and rank evaluation for pre-trained model selection.

Given a labeled target set and per-model candidate bundles (embeddings,
optional source-head probabilities, optional conv-gradient norms), this
package scores how promising each candidate is for fine-tuning, without
running the fine-tuning itself. The headline score multiplies a
label-feasibility term (projection fit + nearest-neighbor label
probability) with a feature-update term (ratio of early-layer gradient
norms). Classical baselines, a rank-correlation evaluation harness with
significance tests, a tiny trainable conv net for end-to-end checks, and
a CLI round it out.
"""

from .baselines import GmmModel, fit_gmm, leep, logme, nleep, parc, pca
from .data import (
    CandidateBundle,
    EvalReport,
    GroundTruthTable,
    ScoreTable,
    TargetSet,
    load_bundle,
    load_ground_truth,
    load_metric_table,
    load_target_set,
    save_bundle,
    save_ground_truth,
    save_target_set,
)
from .errors import (
    NumericError,
    PreconditionError,
    TfrankError,
    ValidationError,
)
from .micronet import (
    GeneratorSpec,
    HyperGrid,
    MicroNet,
    MicroNetGrads,
    SplitSpec,
    SyntheticDataset,
    ZooSourceSpec,
    accuracy,
    auc_macro,
    backward_from_embedding_grads,
    backward_from_logit_grads,
    fine_tune_auc,
    forward,
    init_micronet,
    make_dataset,
    make_micro_zoo,
    softmax_probs,
    target_set_from_dataset,
    train,
)
from .nca import NcaConfig, NcaModel, fit_nca, project
from .rankeval import (
    RankConfig,
    average_ranks,
    critical_difference,
    evaluate,
    friedman_test,
    ordinal_ranks,
    weighted_kendall_tau,
)
from .score import CombineMode, KnnConfig, TripletConfig, combined_score, s_fu, s_lp

__version__ = "1.0.0"

__all__ = [
    "GmmModel",
    "fit_gmm",
    "leep",
    "logme",
    "nleep",
    "parc",
    "pca",
    "NcaConfig",
    "NcaModel",
    "fit_nca",
    "project",
    "RankConfig",
    "average_ranks",
    "critical_difference",
    "evaluate",
    "friedman_test",
    "ordinal_ranks",
    "weighted_kendall_tau",
    "CombineMode",
    "KnnConfig",
    "TripletConfig",
    "combined_score",
    "s_fu",
    "s_lp",
    "GeneratorSpec",
    "HyperGrid",
    "MicroNet",
    "MicroNetGrads",
    "SplitSpec",
    "SyntheticDataset",
    "ZooSourceSpec",
    "accuracy",
    "auc_macro",
    "backward_from_embedding_grads",
    "backward_from_logit_grads",
    "fine_tune_auc",
    "forward",
    "init_micronet",
    "make_dataset",
    "make_micro_zoo",
    "softmax_probs",
    "target_set_from_dataset",
    "train",
    "CandidateBundle",
    "EvalReport",
    "GroundTruthTable",
    "ScoreTable",
    "TargetSet",
    "load_bundle",
    "load_ground_truth",
    "load_metric_table",
    "load_target_set",
    "save_bundle",
    "save_ground_truth",
    "save_target_set",
    "TfrankError",
    "ValidationError",
    "PreconditionError",
    "NumericError",
    "__version__",
]
