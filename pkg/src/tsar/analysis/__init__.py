from .activity import (
    ActivityTable,
    Histogram2D,
    activity_table,
    brute_force_activity,
    log_rank,
    modularity_histogram,
    synthetic_trace,
    task_agnostic_activity,
    task_specific_activity,
    timelag_histogram,
)
from .bursts import (
    DEFAULT_THRESHOLDS,
    PowerLawFit,
    RegimeThresholds,
    log_binned,
    powerlaw_fit,
    spike_size_distribution,
)
from .encoding import encoding_cluster_check, encoding_projection, knn_loo_accuracy, pca
from .regulation import class_node_dynamics, cp_sign_analysis, pearson, upstream_spikes
from .stats import bootstrap_ci, mann_whitney_u, sign_test, stats_suite

__all__ = [
    "ActivityTable",
    "DEFAULT_THRESHOLDS",
    "Histogram2D",
    "PowerLawFit",
    "RegimeThresholds",
    "activity_table",
    "bootstrap_ci",
    "brute_force_activity",
    "class_node_dynamics",
    "cp_sign_analysis",
    "encoding_cluster_check",
    "encoding_projection",
    "knn_loo_accuracy",
    "log_binned",
    "log_rank",
    "mann_whitney_u",
    "modularity_histogram",
    "pca",
    "pearson",
    "powerlaw_fit",
    "sign_test",
    "spike_size_distribution",
    "stats_suite",
    "synthetic_trace",
    "task_agnostic_activity",
    "task_specific_activity",
    "timelag_histogram",
]
