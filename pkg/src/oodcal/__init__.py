"""Continual out-of-distribution detection with calibrated per-class
similarity thresholds.

A cosine-head classifier accepts a sample as in-distribution when its best
class similarity clears th_c = mu_c - eta * sigma_c. The package provides
the fixed eta = 1 baseline, a label-peeking linear search for the optimal
eta (an upper-bound reference), and a deployable estimator that combines
leave-one-class-out calibration with a running average over detections.
"""

from .continual import (
    METHODS,
    BatchVerdict,
    ContinualState,
    EtaRecord,
    ProtocolConfig,
    detect_batch,
    fixed_eta_baseline,
    loocv_eta,
    on_detection,
    run_protocol,
)
from .datasets import (
    DataConsistencyError,
    DataFormatError,
    DataLengthError,
    LabeledDataset,
    SyntheticSpec,
    by_class,
    choose_id_classes,
    load_cifar10,
    load_idx_pair,
    make_synthetic,
    orthogonal_cluster_means,
    subset_classes,
    write_cifar10,
    write_idx_pair,
)
from .network import (
    CosineMLPClassifier,
    DivergenceError,
    gradient_check,
    gradient_check_detailed,
    load_checkpoint,
    save_checkpoint,
)
from .openset import OpenSetClassifier
from .reporting import (
    AggregateRow,
    StageReport,
    aggregate,
    emit,
    emit_aggregate,
    evaluate_stage,
    holm_bonferroni,
    load_reports,
    make_stage_report,
    students_t,
)
from .scoring import (
    OOD_LABEL,
    ClassStats,
    DegenerateScaleError,
    InsufficientDataError,
    ScoreTable,
    ThresholdPolicy,
    build_score_table,
    fit_class_stats,
    neg_z,
)
from .search import (
    METRICS,
    SearchResult,
    accuracies_at,
    candidate_etas,
    cheat_search,
    grid_search_eta,
    id_neg_z_values,
    metric_value,
    ood_neg_z_values,
    search_eta,
)

__version__ = "0.1.0"

__all__ = [
    "METHODS",
    "METRICS",
    "OOD_LABEL",
    "AggregateRow",
    "BatchVerdict",
    "ClassStats",
    "ContinualState",
    "CosineMLPClassifier",
    "DataConsistencyError",
    "DataFormatError",
    "DataLengthError",
    "DegenerateScaleError",
    "DivergenceError",
    "EtaRecord",
    "InsufficientDataError",
    "LabeledDataset",
    "OpenSetClassifier",
    "ProtocolConfig",
    "ScoreTable",
    "SearchResult",
    "StageReport",
    "SyntheticSpec",
    "ThresholdPolicy",
    "accuracies_at",
    "aggregate",
    "build_score_table",
    "by_class",
    "candidate_etas",
    "cheat_search",
    "choose_id_classes",
    "detect_batch",
    "emit",
    "emit_aggregate",
    "evaluate_stage",
    "fit_class_stats",
    "fixed_eta_baseline",
    "grid_search_eta",
    "gradient_check",
    "gradient_check_detailed",
    "holm_bonferroni",
    "id_neg_z_values",
    "load_checkpoint",
    "load_cifar10",
    "load_idx_pair",
    "load_reports",
    "loocv_eta",
    "make_stage_report",
    "make_synthetic",
    "metric_value",
    "neg_z",
    "on_detection",
    "ood_neg_z_values",
    "orthogonal_cluster_means",
    "run_protocol",
    "save_checkpoint",
    "search_eta",
    "students_t",
    "subset_classes",
    "write_cifar10",
    "write_idx_pair",
]
