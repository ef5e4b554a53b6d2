"""Cross-validated influence-function variance, Wald intervals and Wald tests."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from ctmle.eif import PS_FLOOR, eif_eval
from ctmle.learners.folds import FoldScheme
from ctmle.nuisance import estimate_joint_nuisance, estimate_nuisance


class VarianceError(RuntimeError):
    pass


@dataclass
class VarianceEstimate:
    tau2_cv: float
    se: float
    V: int
    per_fold_variances: list = field(default_factory=list)
    n: int = 0


def normal_quantile(p):
    return float(special.ndtri(p))


def wald_ci(psi, se, level=0.95):
    """Symmetric normal-theory interval ``psi -/+ z * se``."""
    if se < 0:
        raise ValueError("standard error must be non-negative")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    half = normal_quantile((1 + level) / 2) * se
    return (psi - half, psi + half)


def chi2_sf(x, df):
    return float(special.gammaincc(df / 2.0, x / 2.0)) if x > 0 else 1.0


@dataclass
class WaldTest:
    statistic: float
    df: int
    p_value: float


def wald_test_equal_means(estimates, covariance):
    """Test that all K means are equal using the K-1 successive differences."""
    psi = np.asarray(estimates, dtype=float).ravel()
    sigma = np.asarray(covariance, dtype=float)
    K = psi.size
    if K < 2:
        raise ValueError("need at least two estimates")
    if sigma.shape != (K, K):
        raise ValueError("covariance shape mismatch")
    if not np.allclose(sigma, sigma.T, atol=1e-12 * max(1.0, np.abs(sigma).max())):
        raise ValueError("covariance must be symmetric")
    C = np.zeros((K - 1, K))
    for k in range(K - 1):
        C[k, k], C[k, k + 1] = 1.0, -1.0
    d = C @ psi
    M = C @ sigma @ C.T
    rank = np.linalg.matrix_rank(M)
    df = K - 1
    if rank < df:
        warnings.warn("singular contrast covariance; using pseudo-inverse", RuntimeWarning,
                      stacklevel=2)
        stat = float(d @ linalg.pinv(M) @ d)
        df = int(rank)
    else:
        stat = float(d @ linalg.solve(M, d, assume_a="sym"))
    stat = max(stat, 0.0)
    return WaldTest(stat, df, chi2_sf(stat, df) if df > 0 else 1.0)


def _fold_tsm_eif(w, a, y, or_spec, ps_spec, kind, floor, seed, train, valid):
    b = estimate_nuisance(w, a, y, or_spec, ps_spec, kind, floor, seed, train, valid)
    return eif_eval(b.or_pred, b.ps_pred, a[valid], y[valid], float(np.mean(b.or_pred)))


def _fold_eif(ds, or_spec, ps_spec, kind, target, arm, floor, seed, train, valid):
    w, y = ds.w, ds.y
    if target == "tsm":
        return _fold_tsm_eif(w, ds.indicator(arm), y, or_spec, ps_spec, kind, floor, seed,
                             train, valid)
    if target == "ate":
        d1 = _fold_tsm_eif(w, ds.indicator(1), y, or_spec, ps_spec, kind, floor, seed,
                           train, valid)
        d0 = _fold_tsm_eif(w, ds.indicator(0), y, or_spec, ps_spec, kind, floor, seed,
                           train, valid)
        return d1 - d0
    if target == "ate_direct":
        a = ds.indicator(1)
        j = estimate_joint_nuisance(w, a, y, or_spec, ps_spec, floor, seed, train, valid)
        av, yv = a[valid], y[valid]
        lg = np.where(av == 1, j.ps_pred, 1 - j.ps_pred)
        h = (2 * av - 1) / lg
        q_obs = np.where(av == 1, j.or1, j.or0)
        diff = j.or1 - j.or0
        return h * (yv - q_obs) + diff - diff.mean()
    raise ValueError(f"unknown target {target!r}")


def cv_if_variance(ds, or_spec, ps_spec, folds: FoldScheme, kind="adaptive", target="tsm",
                   arm=1, floor=PS_FLOOR, seed=0):
    """Cross-validated variance of the influence function.

    For each fold the nuisances are fitted on the other folds, influence
    values are evaluated on the held-out rows (centred at the held-out mean
    of the outcome-regression predictions), centred within the fold and
    squared; the V within-fold mean squares are averaged.

    Parameters
    ----------
    ds : Dataset
    or_spec, ps_spec : LearnerSpec or str
        Outcome learner and the propensity learner (the smoother when
        ``kind="adaptive"``).
    folds : FoldScheme
    kind : {"adaptive", "standard"}
    target : {"tsm", "ate", "ate_direct"}
        Treatment-specific mean of ``arm``, ATE by relabelling, or ATE with a
        joint outcome regression.

    Returns
    -------
    VarianceEstimate
        ``se`` is on the unit outcome scale.
    """
    if folds.n != ds.n:
        raise VarianceError("fold scheme does not match dataset size")
    per_fold = []
    for v in range(folds.V):
        valid = folds.validation(v)
        train = folds.training(v) if folds.V > 1 else valid
        try:
            d = _fold_eif(ds, or_spec, ps_spec, kind, target, arm, floor, seed, train, valid)
        except Exception as exc:
            raise VarianceError(f"fold {v}: {exc}") from exc
        per_fold.append(float(np.mean((d - d.mean()) ** 2)))
    tau2 = float(np.mean(per_fold))
    return VarianceEstimate(tau2, float(np.sqrt(tau2 / ds.n)), folds.V, per_fold, ds.n)
