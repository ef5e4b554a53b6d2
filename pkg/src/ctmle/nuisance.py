"""Outcome regressions and (adaptive) propensity scores shared by the estimators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ctmle.eif import PS_FLOOR
from ctmle.learners import LearnerSpec, fit_learner
from ctmle.learners.folds import FoldScheme
from ctmle.learners.glm import GlmFit, SeparationError, fit_glm
from ctmle.learners.splines import NaturalSplineBasis

OR_BOUND = 1e-6
DEFAULT_SMOOTHER = LearnerSpec("spline", {"df": 2})


class NuisanceError(RuntimeError):
    pass


def clip_or(q, bound=OR_BOUND):
    return np.clip(np.asarray(q, dtype=float), bound, 1.0 - bound)


class AdaptivePropensity:
    """P(A = 1 | Qbar(W)): treatment regressed on outcome-regression predictions.

    With the default smoother this is a logistic GLM on df = 2 natural
    splines of each prediction column. Constant predictions give an
    intercept-only fit, a constant treatment gives constant predictions, and
    separated data are clipped instead of failing.
    """

    def __init__(self, smoother=DEFAULT_SMOOTHER, floor=PS_FLOOR, seed=0):
        self.smoother = LearnerSpec.parse(smoother)
        self.floor = floor
        self.seed = seed
        self.constant = None
        self.bases = None
        self.coef = None
        self.learner = None
        self.separated = False

    def fit(self, or_pred, a):
        q = np.asarray(or_pred, dtype=float).reshape(len(a), -1)
        a = np.asarray(a, dtype=float)
        if not np.all(np.isfinite(q)):
            raise NuisanceError("outcome predictions must be finite")
        if np.all(a == a[0]):
            warnings.warn("treatment is constant; adaptive propensity is degenerate",
                          RuntimeWarning, stacklevel=2)
            self.constant = float(a[0])
            return self
        varying = [j for j in range(q.shape[1]) if np.ptp(q[:, j]) > 0]
        if not varying:
            self.constant = float(a.mean())
            return self
        self.columns = varying
        if self.smoother.name == "spline":
            df = int(self.smoother.get("df", 2))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self.bases = [NaturalSplineBasis(df).fit(q[:, j]) for j in varying]
            design = self._design(q)
            try:
                with warnings.catch_warnings():
                    warnings.filterwarnings("ignore", "dropping", RuntimeWarning)
                    self.coef = fit_glm(design, a, link="logit").coefficients
            except SeparationError as exc:
                warnings.warn("adaptive propensity separated; predictions clipped",
                              RuntimeWarning, stacklevel=2)
                self.separated = True
                self.coef = exc.coefficients
        else:
            self.learner = fit_learner(self.smoother, q[:, varying], a, link="logit",
                                       seed=self.seed)
        return self

    def _design(self, q):
        return np.column_stack([b.transform(q[:, j]) for b, j in zip(self.bases, self.columns)])

    def predict(self, or_pred):
        q = np.asarray(or_pred, dtype=float)
        q = q.reshape(q.shape[0], -1)
        if self.constant is not None:
            g = np.full(q.shape[0], self.constant)
        elif self.coef is not None:
            g = expit(self._design(q) @ self.coef[1:] + self.coef[0])
        else:
            g = self.learner.predict(q[:, self.columns])
        return np.clip(g, self.floor, 1.0 - self.floor if self.separated else 1.0)


def fit_adaptive_ps(a, or_pred, smoother=DEFAULT_SMOOTHER, floor=PS_FLOOR, seed=0):
    """Fit the adaptive propensity score; returns ``(fitted, predictions)``."""
    fitted = AdaptivePropensity(smoother, floor, seed).fit(or_pred, a)
    return fitted, fitted.predict(or_pred)


def fit_outcome(w, a, y, or_spec, seed=0):
    """Regress ``y`` on ``w`` among rows with ``a == 1``."""
    treated = np.asarray(a) == 1
    if not np.any(treated):
        raise NuisanceError("no treated units to fit the outcome regression")
    return fit_learner(or_spec, np.asarray(w)[treated], np.asarray(y)[treated], link="logit",
                       seed=seed)


class SeparatedPropensity:
    """A logistic propensity whose coefficients diverged, kept and clipped.

    Mirrors the adaptive propensity's handling of separation so that both
    kinds of estimator see predictions in ``[floor, 1 - floor]``.
    """

    separated = True

    def __init__(self, coefficients, floor=PS_FLOOR):
        self.fit = GlmFit(np.asarray(coefficients, dtype=float), "logit")
        self.floor = floor

    def predict(self, x):
        return np.clip(self.fit.predict(x), self.floor, 1.0 - self.floor)


def fit_standard_ps(w, a, ps_spec, seed=0, floor=PS_FLOOR):
    """Treatment regressed on covariates.

    A separated logistic GLM is kept with clipped predictions and a warning
    rather than raised; other learners propagate their errors.
    """
    spec = LearnerSpec.parse(ps_spec)
    try:
        return fit_learner(spec, w, a, link="logit", seed=seed)
    except SeparationError as exc:
        if spec.name != "glm" or exc.coefficients is None:
            raise
        warnings.warn("propensity score separated; predictions clipped", RuntimeWarning,
                      stacklevel=2)
        return SeparatedPropensity(exc.coefficients, floor)


@dataclass
class NuisanceBundle:
    or_pred: np.ndarray
    ps_pred: np.ndarray
    ps_kind: str
    folds: FoldScheme | None = None
    separated: bool = False


def estimate_nuisance(w, a, y, or_spec, ps_spec, kind="adaptive", floor=PS_FLOOR, seed=0,
                      train=None, evaluate=None):
    """Fit nuisances on ``train`` rows and predict them on ``evaluate`` rows.

    ``kind`` is ``"adaptive"`` (treatment regressed on the outcome
    regression's predictions at the training rows) or ``"standard"``
    (treatment regressed on covariates). Both index arguments default to all
    rows.
    """
    w = np.asarray(w, dtype=float)
    a = np.asarray(a, dtype=int)
    n = a.size
    train = np.arange(n) if train is None else np.asarray(train)
    evaluate = np.arange(n) if evaluate is None else np.asarray(evaluate)
    outcome = fit_outcome(w[train], a[train], y[train], or_spec, seed=seed)
    q_eval = clip_or(outcome.predict(w[evaluate]))
    if kind == "adaptive":
        q_train = clip_or(outcome.predict(w[train]))
        ps = AdaptivePropensity(ps_spec, floor, seed).fit(q_train, a[train])
        g_eval = ps.predict(q_eval)
        separated = ps.separated
    elif kind == "standard":
        separated = False
        if np.all(a[train] == a[train][0]):
            g_eval = np.full(evaluate.size, float(a[train][0]))
        else:
            ps = fit_standard_ps(w[train], a[train], ps_spec, seed=seed, floor=floor)
            g_eval = ps.predict(w[evaluate])
            separated = getattr(ps, "separated", False)
        g_eval = np.clip(g_eval, floor, 1.0)
    else:
        raise ValueError(f"unknown propensity kind {kind!r}")
    return NuisanceBundle(q_eval, g_eval, kind, separated=separated)


def multiarm_propensity(w, a, arms, ps_spec, floor=PS_FLOOR, seed=0):
    """Propensity of every arm by a sequence of binary regressions.

    The last arm is modelled first, then each remaining arm in label order
    conditional on not belonging to an arm already modelled; the final
    unmodelled arm takes the remaining probability. Rows sum to one.
    """
    w = np.asarray(w, dtype=float)
    a = np.asarray(a)
    arms = list(arms)
    K = len(arms)
    if K < 2:
        raise NuisanceError("need at least two arms")
    order = [arms[-1]] + arms[:-2]
    out = np.zeros((a.size, K))
    remaining = np.ones(a.size)
    eligible = np.ones(a.size, dtype=bool)
    for arm in order:
        target = (a[eligible] == arm).astype(float)
        if target.sum() == 0:
            raise NuisanceError(f"arm {arm} has no observations")
        if np.all(target == 1):
            cond = np.ones(a.size)
        else:
            cond = fit_standard_ps(w[eligible], target, ps_spec, seed, floor).predict(w)
        cond = np.clip(cond, 0.0, 1.0)
        out[:, arms.index(arm)] = cond * remaining
        remaining = remaining - out[:, arms.index(arm)]
        eligible &= a != arm
    out[:, arms.index(arms[-2])] = remaining
    return out


@dataclass
class JointNuisance:
    """Outcome regression on (A, W) evaluated at both treatment levels, with a
    propensity regressed on the pair of predictions."""

    or1: np.ndarray
    or0: np.ndarray
    ps_pred: np.ndarray


def estimate_joint_nuisance(w, a, y, or_spec, smoother, floor=PS_FLOOR, seed=0, train=None,
                            evaluate=None):
    w = np.asarray(w, dtype=float)
    a = np.asarray(a, dtype=int)
    n = a.size
    train = np.arange(n) if train is None else np.asarray(train)
    evaluate = np.arange(n) if evaluate is None else np.asarray(evaluate)
    if np.all(a[train] == a[train][0]):
        raise NuisanceError("both treatment levels are needed for the joint outcome regression")
    design = np.column_stack([a, w])
    outcome = fit_learner(or_spec, design[train], y[train], link="logit", seed=seed)

    def at(level, rows):
        return clip_or(outcome.predict(np.column_stack([np.full(rows.size, level), w[rows]])))

    pair_train = np.column_stack([at(1, train), at(0, train)])
    ps = AdaptivePropensity(smoother, floor, seed).fit(pair_train, a[train])
    or1, or0 = at(1, evaluate), at(0, evaluate)
    g = np.clip(ps.predict(np.column_stack([or1, or0])), floor, 1.0 - floor)
    return JointNuisance(or1, or0, g)
