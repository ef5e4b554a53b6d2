"""Standard and collaborative TMLE / one-step estimators of treatment-specific means.

The collaborative estimators replace the usual propensity score P(A=1 | W)
with the adaptive score P(A=1 | Qbar_n(W)), obtained by regressing treatment
on the outcome regression's own predictions. Everything is computed on the
unit outcome scale and mapped back at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from ctmle.data import DataError, Dataset, unscale_estimate
from ctmle.eif import PS_FLOOR, eif_eval, plugin_estimate
from ctmle.inference import (
    VarianceEstimate,
    WaldTest,
    cv_if_variance,
    wald_ci,
    wald_test_equal_means,
)
from ctmle.learners.folds import FoldScheme, make_folds
from ctmle.learners.glm import SeparationError, safe_logit
from ctmle.nuisance import (
    DEFAULT_SMOOTHER,
    OR_BOUND,
    AdaptivePropensity,
    NuisanceBundle,
    clip_or,
    estimate_joint_nuisance,
    estimate_nuisance,
    multiarm_propensity,
)

EPS_BOUND = 30.0


class FluctuationError(SeparationError):
    """The fluctuation coefficient ran into its bound."""


@dataclass
class EstimatorConfig:
    ps_floor: float = PS_FLOOR
    or_bound: float = OR_BOUND
    level: float = 0.95
    V: int = 5
    seed: int = 0
    variance: str = "cv"  # "cv", "eif" (in-sample) or "none"
    adaptive_iterations: int = 1

    def folds_for(self, ds: Dataset, strata=None) -> FoldScheme:
        return make_folds(ds.n, self.V, self.seed, strata=ds.a if strata is None else strata)


@dataclass
class EstimateReport:
    estimator: str
    psi: float
    psi_scaled: float
    epsilon: float | None
    eif_values: np.ndarray
    se: float
    ci: tuple
    level: float
    n: int
    target: str = "tsm"
    diagnostics: dict = field(default_factory=dict)

    @property
    def eif_mean(self) -> float:
        return float(self.diagnostics.get("eif_mean", np.mean(self.eif_values)))

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "target": self.target,
            "psi": self.psi,
            "psi_scaled": self.psi_scaled,
            "se": self.se,
            "ci": list(self.ci),
            "level": self.level,
            "epsilon": self.epsilon,
            "eif_mean": self.eif_mean,
            "ps_range": list(self.diagnostics.get("ps_range", [])),
            "n": self.n,
            "diagnostics": {k: v for k, v in self.diagnostics.items()
                            if k not in ("eif_mean", "ps_range")},
        }


def _config(config):
    return EstimatorConfig() if config is None else config


def solve_fluctuation(offset, covariate, y, bound=EPS_BOUND, tol=1e-13, max_iter=200):
    """MLE of ``eps`` in ``logit(p) = offset + eps * covariate`` (no intercept).

    Safeguarded Newton on the score ``sum h (y - p)``, which is decreasing
    in ``eps``, with bisection inside a maintained bracket on
    ``[-bound, bound]``.
    """
    h = np.asarray(covariate, dtype=float)
    keep = h != 0
    h, off, y = h[keep], np.asarray(offset, float)[keep], np.asarray(y, float)[keep]
    n = max(int(np.sum(keep)), 1)
    if h.size == 0:
        return 0.0

    def score(eps):
        p = expit(off + eps * h)
        return float(np.sum(h * (y - p))), p

    lo, hi = -bound, bound
    s_lo, _ = score(lo)
    s_hi, _ = score(hi)
    if s_lo < 0 or s_hi > 0:
        raise FluctuationError(f"fluctuation coefficient outside [-{bound}, {bound}]")
    eps = 0.0
    for _ in range(max_iter):
        s, p = score(eps)
        if abs(s) / n <= tol:
            return eps
        if s > 0:
            lo = eps
        else:
            hi = eps
        deriv = float(np.sum(h * h * p * (1 - p)))
        step = s / deriv if deriv > 0 else np.inf
        cand = eps + step
        if not (lo < cand < hi):
            cand = 0.5 * (lo + hi)
        if cand == eps or hi - lo <= 1e-15 * max(1.0, abs(eps)):
            return eps
        eps = cand
    return eps


def target_or(or_pred, ps_pred, a, y, or_bound=OR_BOUND):
    """Logistic fluctuation of the outcome regression along ``H = A / g``.

    Returns
    -------
    epsilon : float
    targeted : ndarray
        ``expit(logit(q) + epsilon / g)``, the update evaluated at A = 1.
    """
    q = clip_or(or_pred, or_bound)
    g = np.asarray(ps_pred, dtype=float)
    a = np.asarray(a, dtype=float)
    offset = safe_logit(q, or_bound)
    eps = solve_fluctuation(offset, a / g, y)
    return eps, expit(offset + eps / g)


def _finish(name, ds, psi_s, eif, epsilon, ps, config, variance, target="tsm", extra=None):
    config = _config(config)
    difference = target != "tsm"
    width = ds.y_scale.width
    psi = unscale_estimate(psi_s, ds.y_scale, difference=difference)
    if variance is None:
        se_s = float(np.sqrt(np.mean((eif - eif.mean()) ** 2) / ds.n))
        method = "eif"
    else:
        se_s = variance.se
        method = "cv"
    se = se_s * width
    diagnostics = {
        "eif_mean": float(np.mean(eif)),
        "ps_range": [float(np.min(ps)), float(np.max(ps))],
        "variance_method": method,
        "se_scaled": se_s,
    }
    if variance is not None:
        diagnostics["per_fold_variances"] = variance.per_fold_variances
    if extra:
        diagnostics.update(extra)
    return EstimateReport(name, psi, float(psi_s), epsilon, eif, se,
                          wald_ci(psi, se, config.level), config.level, ds.n, target,
                          diagnostics)


def _variance(ds, or_spec, ps_spec, kind, target, config, arm=1):
    config = _config(config)
    if config.variance != "cv":
        return None
    folds = config.folds_for(ds)
    return cv_if_variance(ds, or_spec, ps_spec, folds, kind=kind, target=target, arm=arm,
                          floor=config.ps_floor, seed=config.seed)


def _binary(ds: Dataset, arm: int) -> Dataset:
    if arm not in ds.arms:
        raise DataError(f"arm {arm} not among {ds.arms}")
    a = ds.indicator(arm)
    if not a.any():
        raise DataError(f"arm {arm} has no observations")
    return a


def nuisance_for(ds, or_spec, ps_spec, kind, config=None, arm=1) -> NuisanceBundle:
    config = _config(config)
    a = _binary(ds, arm)
    return estimate_nuisance(ds.w, a, ds.y, or_spec, ps_spec, kind, config.ps_floor,
                             config.seed)


def _targeted_tsm(name, ds, or_spec, ps_spec, kind, config, arm):
    config = _config(config)
    a = _binary(ds, arm)
    b = nuisance_for(ds, or_spec, ps_spec, kind, config, arm)
    eps, qstar = target_or(b.or_pred, b.ps_pred, a, ds.y, config.or_bound)
    g = b.ps_pred
    epsilons = [eps]
    for _ in range(1, config.adaptive_iterations if kind == "adaptive" else 1):
        ps = AdaptivePropensity(ps_spec, config.ps_floor, config.seed).fit(qstar, a)
        g = ps.predict(qstar)
        eps, qstar = target_or(qstar, g, a, ds.y, config.or_bound)
        epsilons.append(eps)
    psi_s = plugin_estimate(qstar)
    eif = eif_eval(qstar, g, a, ds.y, psi_s)
    variance = _variance(ds, or_spec, ps_spec, kind, "tsm", config, arm)
    extra = {"arm": arm, "ps_kind": kind, "separation": b.separated}
    if len(epsilons) > 1:
        extra["epsilons"] = epsilons
    return _finish(name, ds, psi_s, eif, float(sum(epsilons)), g, config, variance,
                   extra=extra)


def _onestep_tsm(name, ds, or_spec, ps_spec, kind, config, arm):
    config = _config(config)
    a = _binary(ds, arm)
    b = nuisance_for(ds, or_spec, ps_spec, kind, config, arm)
    plug = plugin_estimate(b.or_pred)
    d = eif_eval(b.or_pred, b.ps_pred, a, ds.y, plug)
    correction = float(np.mean(d))
    psi_s = plug + correction
    variance = _variance(ds, or_spec, ps_spec, kind, "tsm", config, arm)
    report = _finish(name, ds, psi_s, d - correction, None, b.ps_pred, config, variance,
                     extra={"arm": arm, "ps_kind": kind, "plugin": plug,
                            "correction": correction, "separation": b.separated})
    return report


def ctmle_tsm(ds, or_spec="glm", smoother_spec=DEFAULT_SMOOTHER, config=None, arm=1):
    """Collaborative TMLE of E[E(Y | A = arm, W)].

    Outcome regression fitted on the ``arm`` rows, adaptive propensity from
    regressing the arm indicator on its predictions, then a single logistic
    fluctuation and the plug-in mean of the targeted predictions.
    """
    return _targeted_tsm("ctmle", ds, or_spec, smoother_spec, "adaptive", config, arm)


def tmle_tsm(ds, or_spec="glm", ps_spec="glm", config=None, arm=1):
    """Standard TMLE: same as :func:`ctmle_tsm` with P(A = arm | W) as the propensity."""
    return _targeted_tsm("tmle", ds, or_spec, ps_spec, "standard", config, arm)


def onestep_tsm(ds, or_spec="glm", ps_spec="glm", config=None, arm=1):
    """Plug-in plus the empirical mean of the estimated influence function."""
    return _onestep_tsm("onestep", ds, or_spec, ps_spec, "standard", config, arm)


def collab_onestep_tsm(ds, or_spec="glm", smoother_spec=DEFAULT_SMOOTHER, config=None, arm=1):
    """One-step correction computed with the adaptive propensity score."""
    return _onestep_tsm("conestep", ds, or_spec, smoother_spec, "adaptive", config, arm)


TSM_ESTIMATORS = {
    "ctmle": (ctmle_tsm, "adaptive"),
    "tmle": (tmle_tsm, "standard"),
    "onestep": (onestep_tsm, "standard"),
    "conestep": (collab_onestep_tsm, "adaptive"),
}


def ate_by_relabeling(ds, or_spec="glm", ps_spec=DEFAULT_SMOOTHER, config=None, base="ctmle"):
    """ATE as the difference of the two treatment-specific means.

    ``base`` picks the arm-level estimator; the arm-0 mean is the same
    procedure run with the treatment labels swapped.
    """
    config = _config(config)
    if base not in TSM_ESTIMATORS:
        raise ValueError(f"unknown base estimator {base!r}")
    func, kind = TSM_ESTIMATORS[base]
    if set(np.unique(ds.a).tolist()) != {0, 1}:
        raise DataError("ATE needs a binary treatment with both arms observed")
    inner = replace(config, variance="none")
    r1 = func(ds, or_spec, ps_spec, inner, arm=1)
    r0 = func(ds, or_spec, ps_spec, inner, arm=0)
    psi_s = r1.psi_scaled - r0.psi_scaled
    eif = r1.eif_values - r0.eif_values
    variance = _variance(ds, or_spec, ps_spec, kind, "ate", config)
    g = np.concatenate([r1.diagnostics["ps_range"], r0.diagnostics["ps_range"]])
    extra = {"psi_arm1": r1.psi, "psi_arm0": r0.psi, "epsilon_arm0": r0.epsilon,
             "ps_kind": kind, "ps_range_arm0": r0.diagnostics["ps_range"],
             "separation": bool(r1.diagnostics["separation"] or r0.diagnostics["separation"])}
    report = _finish(f"{base}-ate", ds, psi_s, eif, r1.epsilon, r1.diagnostics["ps_range"],
                     config, variance, target="ate", extra=extra)
    report.diagnostics["ps_range_all"] = [float(g.min()), float(g.max())]
    return report


def ctmle_ate_direct(ds, or_spec="glm", smoother_spec=DEFAULT_SMOOTHER, config=None):
    """Collaborative TMLE aimed at the ATE in one fluctuation.

    A single outcome regression on (A, W) is evaluated at A = 1 and A = 0;
    the propensity is regressed on that pair of predictions, and the
    fluctuation covariate is ``(2A - 1) / P(A | ...)``.
    """
    config = _config(config)
    a = _binary(ds, 1)
    if a.all():
        raise DataError("arm 0 has no observations")
    j = estimate_joint_nuisance(ds.w, a, ds.y, or_spec, smoother_spec, config.ps_floor,
                                config.seed)
    g = j.ps_pred
    lg = np.where(a == 1, g, 1 - g)
    h = (2 * a - 1) / lg
    off1 = safe_logit(j.or1, config.or_bound)
    off0 = safe_logit(j.or0, config.or_bound)
    offset = np.where(a == 1, off1, off0)
    eps = solve_fluctuation(offset, h, ds.y)
    q1 = expit(off1 + eps / g)
    q0 = expit(off0 - eps / (1 - g))
    diff = q1 - q0
    psi_s = float(np.mean(diff))
    q_obs = np.where(a == 1, q1, q0)
    eif = h * (ds.y - q_obs) + diff - psi_s
    variance = _variance(ds, or_spec, smoother_spec, "adaptive", "ate_direct", config)
    return _finish("ctmle-ate", ds, psi_s, eif, eps, g, config, variance, target="ate",
                   extra={"psi_arm1": unscale_estimate(float(np.mean(q1)), ds.y_scale),
                          "psi_arm0": unscale_estimate(float(np.mean(q0)), ds.y_scale)})


def cv_ctmle_tsm(ds, or_spec="glm", smoother_spec=DEFAULT_SMOOTHER, folds=None, config=None,
                 arm=1):
    """Cross-validated collaborative TMLE.

    Nuisances come from the training part of each fold and are evaluated on
    its validation rows; one fluctuation coefficient is fitted on the pooled
    validation rows, and the estimate averages the per-fold validation means
    of the targeted predictions.
    """
    config = _config(config)
    a = _binary(ds, arm)
    folds = config.folds_for(ds, strata=a) if folds is None else folds
    if folds.V < 2:
        raise ValueError("cross-validated TMLE needs at least two folds")
    q = np.empty(ds.n)
    g = np.empty(ds.n)
    for v, train, valid in folds.splits():
        if not a[train].any():
            raise DataError(f"fold {v}: no treated units in the training sample")
        b = estimate_nuisance(ds.w, a, ds.y, or_spec, smoother_spec, "adaptive",
                              config.ps_floor, config.seed, train, valid)
        q[valid], g[valid] = b.or_pred, b.ps_pred
    eps, qstar = target_or(q, g, a, ds.y, config.or_bound)
    fold_means = np.array([qstar[folds.validation(v)].mean() for v in range(folds.V)])
    psi_s = float(fold_means.mean())
    centre = fold_means[folds.assignment]
    eif = eif_eval(qstar, g, a, ds.y, 0.0) - centre
    per_fold = [float(np.var(eif[folds.validation(v)])) for v in range(folds.V)]
    tau2 = float(np.mean(per_fold))
    variance = VarianceEstimate(tau2, float(np.sqrt(tau2 / ds.n)), folds.V, per_fold, ds.n)
    return _finish("cv-ctmle", ds, psi_s, eif, eps, g, config, variance,
                   extra={"arm": arm, "ps_kind": "adaptive"})


@dataclass
class MultiArmReport:
    arms: tuple
    reports: list
    covariance: np.ndarray
    wald: WaldTest
    propensity_ranges: dict

    def to_dict(self):
        return {
            "arms": list(self.arms),
            "estimates": [r.to_dict() for r in self.reports],
            "covariance": self.covariance.tolist(),
            "wald": {"statistic": self.wald.statistic, "df": self.wald.df,
                     "p_value": self.wald.p_value},
            "propensity_ranges": {str(k): v for k, v in self.propensity_ranges.items()},
        }


def multiarm_means(ds, or_spec="glm", smoother_spec=DEFAULT_SMOOTHER, config=None,
                   estimator="ctmle", ps_spec="glm"):
    """Treatment-specific means for every arm plus a joint Wald test of equality.

    Arm propensities for the standard estimators come from a sequence of
    binary regressions (last arm first, then the others conditional on not
    being in an arm already modelled). The collaborative estimators use each
    arm's adaptive propensity instead. The joint covariance is estimated from
    the stacked per-arm influence values.
    """
    config = _config(config)
    arms = tuple(ds.arms)
    if len(arms) < 2:
        raise DataError("need at least two arms")
    counts = {k: int(np.sum(ds.a == k)) for k in arms}
    empty = [k for k, c in counts.items() if c == 0]
    if empty:
        raise DataError(f"arm(s) {empty} have no observations")
    if estimator not in TSM_ESTIMATORS:
        raise ValueError(f"multi-arm analysis supports {sorted(TSM_ESTIMATORS)}")
    func, kind = TSM_ESTIMATORS[estimator]
    ps_matrix = multiarm_propensity(ds.w, ds.a, arms, ps_spec, config.ps_floor, config.seed)
    reports = []
    for col, arm in enumerate(arms):
        if kind == "adaptive":
            reports.append(func(ds, or_spec, smoother_spec, config, arm=arm))
            continue
        a = ds.indicator(arm)
        b = estimate_nuisance(ds.w, a, ds.y, or_spec, ps_spec, "standard", config.ps_floor,
                              config.seed)
        g = np.clip(ps_matrix[:, col], config.ps_floor, 1.0)
        if estimator == "tmle":
            eps, qstar = target_or(b.or_pred, g, a, ds.y, config.or_bound)
            psi_s = plugin_estimate(qstar)
            eif = eif_eval(qstar, g, a, ds.y, psi_s)
        else:
            eps = None
            plug = plugin_estimate(b.or_pred)
            d = eif_eval(b.or_pred, g, a, ds.y, plug)
            psi_s = plug + float(np.mean(d))
            eif = d - np.mean(d)
        reports.append(_finish(estimator, ds, psi_s, eif, eps, g, config, None,
                               extra={"arm": arm, "ps_kind": "standard"}))
    width = ds.y_scale.width
    stacked = np.vstack([r.eif_values for r in reports]) * width
    covariance = np.atleast_2d(np.cov(stacked, bias=True)) / ds.n
    wald = wald_test_equal_means([r.psi for r in reports], covariance)
    ranges = {arm: [float(ps_matrix[:, c].min()), float(ps_matrix[:, c].max())]
              for c, arm in enumerate(arms)}
    return MultiArmReport(arms, reports, covariance, wald, ranges)


ESTIMATOR_NAMES = ("ctmle", "tmle", "onestep", "conestep", "ctmle-ate", "cv-ctmle")


def run_estimator(name, ds, or_spec="glm", ps_spec="glm", smoother_spec=DEFAULT_SMOOTHER,
                  config=None, estimand="ate", arm=1) -> EstimateReport:
    """Dispatch by CLI name.

    ``estimand="ate"`` gives the average treatment effect (by relabelling,
    except for ``ctmle-ate`` which targets it directly); ``"tsm"`` gives the
    mean of ``arm``.
    """
    config = _config(config)
    if name not in ESTIMATOR_NAMES:
        raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATOR_NAMES}")
    if estimand not in ("ate", "tsm"):
        raise ValueError(f"unknown estimand {estimand!r}")
    if name == "ctmle-ate":
        if estimand != "ate":
            raise ValueError("ctmle-ate only estimates the ATE")
        return ctmle_ate_direct(ds, or_spec, smoother_spec, config)
    if name == "cv-ctmle":
        if estimand == "tsm":
            return cv_ctmle_tsm(ds, or_spec, smoother_spec, None, config, arm=arm)
        folds = config.folds_for(ds)
        r1 = cv_ctmle_tsm(ds, or_spec, smoother_spec, folds, config, arm=1)
        r0 = cv_ctmle_tsm(ds, or_spec, smoother_spec, folds, config, arm=0)
        eif = r1.eif_values - r0.eif_values
        per_fold = [float(np.var(eif[folds.validation(v)])) for v in range(folds.V)]
        tau2 = float(np.mean(per_fold))
        variance = VarianceEstimate(tau2, float(np.sqrt(tau2 / ds.n)), folds.V, per_fold, ds.n)
        return _finish("cv-ctmle-ate", ds, r1.psi_scaled - r0.psi_scaled, eif, r1.epsilon,
                       r1.diagnostics["ps_range"], config, variance, target="ate",
                       extra={"psi_arm1": r1.psi, "psi_arm0": r0.psi})
    func, kind = TSM_ESTIMATORS[name]
    nuisance_spec = smoother_spec if kind == "adaptive" else ps_spec
    if estimand == "ate":
        return ate_by_relabeling(ds, or_spec, nuisance_spec, config, base=name)
    return func(ds, or_spec, nuisance_spec, config, arm=arm)
