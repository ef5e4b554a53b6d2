"""Efficient influence function of the treatment-specific mean, plug-in and remainder."""

from __future__ import annotations

import numpy as np

PS_FLOOR = 1e-6


class EifError(ValueError):
    pass


def plugin_estimate(or_pred) -> float:
    """Mean of outcome-regression predictions over the empirical covariate law."""
    q = np.asarray(or_pred, dtype=float)
    if q.size == 0:
        raise EifError("plug-in of an empty prediction vector")
    return float(np.mean(q))


def eif_eval(or_pred, ps_pred, a, y, psi):
    """Per-observation influence values ``a/g (y - q) + q - psi``.

    Parameters
    ----------
    or_pred, ps_pred, a, y : array_like
        Outcome regression under treatment, propensity of treatment,
        treatment indicator and unit-scale outcome, one entry per row.
    psi : float
        Centering value, normally the plug-in estimate.
    """
    q = np.asarray(or_pred, dtype=float)
    g = np.asarray(ps_pred, dtype=float)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (q.shape == g.shape == a.shape == y.shape):
        raise EifError("eif inputs must have equal lengths")
    treated = a != 0
    if np.any(g[treated] <= 0):
        raise EifError("zero propensity for a treated unit")
    weight = np.zeros_like(q)
    weight[treated] = a[treated] / g[treated]
    return weight * (y - q) + q - psi


def clip_ps(ps_pred, floor=PS_FLOOR):
    return np.clip(np.asarray(ps_pred, dtype=float), floor, 1.0)


def remainder_r2(or_pred, or_true, ps_pred, ps_true, weights=None) -> float:
    """Second-order remainder ``sum_i w_i (g_n - g_0)/g_n * (q_n - q_0)``.

    ``weights`` default to equal weights over the supplied points, which
    should then be a large draw from the true covariate law.
    """
    arrays = [np.asarray(v, dtype=float) for v in (or_pred, or_true, ps_pred, ps_true)]
    if len({arr.shape for arr in arrays}) != 1:
        raise EifError("remainder inputs must have equal lengths")
    qn, q0, gn, g0 = arrays
    if np.any(gn <= 0):
        raise EifError("estimated propensity must be positive")
    wt = np.full(qn.shape, 1.0 / qn.size) if weights is None else np.asarray(weights, float)
    if wt.shape != qn.shape:
        raise EifError("weights length mismatch")
    return float(np.sum(wt * (gn - g0) / gn * (qn - q0)))
