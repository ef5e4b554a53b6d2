"""Collaborative and standard targeted estimators of treatment-specific means."""

from ctmle.data import Dataset, OutcomeScale, scale_outcome, unscale_estimate, validate_dataset
from ctmle.estimators import (
    EstimateReport,
    ate_by_relabeling,
    collab_onestep_tsm,
    ctmle_ate_direct,
    ctmle_tsm,
    cv_ctmle_tsm,
    multiarm_means,
    onestep_tsm,
    tmle_tsm,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "OutcomeScale",
    "EstimateReport",
    "scale_outcome",
    "unscale_estimate",
    "validate_dataset",
    "ctmle_tsm",
    "tmle_tsm",
    "onestep_tsm",
    "collab_onestep_tsm",
    "ctmle_ate_direct",
    "ate_by_relabeling",
    "cv_ctmle_tsm",
    "multiarm_means",
]
