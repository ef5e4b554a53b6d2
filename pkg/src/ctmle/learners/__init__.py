"""Regression primitives for outcome regressions and propensity scores."""

from ctmle.learners.folds import FoldScheme, make_folds
from ctmle.learners.glm import GlmFit, SeparationError, fit_glm
from ctmle.learners.hal import HalBasis, hal_lite_basis
from ctmle.learners.lasso import LassoFit, fit_lasso_logistic, lambda_max
from ctmle.learners.library import (
    LearnerError,
    LearnerSpec,
    cross_fit,
    cv_select,
    fit_learner,
)
from ctmle.learners.splines import NaturalSplineBasis, natural_spline_basis

__all__ = [
    "FoldScheme", "make_folds", "GlmFit", "SeparationError", "fit_glm", "HalBasis",
    "hal_lite_basis", "LassoFit", "fit_lasso_logistic", "lambda_max", "LearnerError",
    "LearnerSpec", "cross_fit", "cv_select", "fit_learner", "NaturalSplineBasis",
    "natural_spline_basis",
]
