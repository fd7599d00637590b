"""Multi-stream CNNs with multi-level feature fusion for multimodal
identification, built on numpy."""
from .estimators import FusionNetClassifier, ModalityCNNClassifier, ScoreFusionClassifier
from .fusion import FusionHead, FusionNetwork, score_major, score_sum
from .metrics import CMCResult, aggregate_runs, cmc_curve, rank_one_accuracy, recall_at_k
from .modality import ModalityNetwork, NetworkSpec, TapSpec, desk_spec, parameter_report, table1_spec
from .synthdata import AugmentConfig, NoiseProfile, generate_dataset, sample_tuples
from .tensor import ConfigurationError, DimensionError, Parameter, grad_check
from .train import Phase, TrainConfig, kfold_search, run_phase

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "CMCResult", "ConfigurationError", "DimensionError", "FusionHead", "FusionNetClassifier",
    "FusionNetwork", "ModalityCNNClassifier", "ModalityNetwork", "NetworkSpec", "NoiseProfile", "Parameter", "Phase",
    "ScoreFusionClassifier", "TapSpec", "TrainConfig", "aggregate_runs", "cmc_curve", "desk_spec", "generate_dataset",
    "grad_check", "kfold_search", "parameter_report", "rank_one_accuracy", "recall_at_k", "run_phase",
    "sample_tuples", "score_major", "score_sum", "table1_spec",
]
