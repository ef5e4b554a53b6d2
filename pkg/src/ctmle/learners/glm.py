"""Generalized linear models fitted by iteratively reweighted least squares."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

SEPARATION_BOUND = 30.0
SCORE_TOL = 1e-8


class SeparationError(RuntimeError):
    """Logistic coefficients diverge: the classes are (quasi-)separated."""

    def __init__(self, message, coefficients=None):
        super().__init__(message)
        self.coefficients = coefficients


def safe_logit(p, bound=1e-6):
    return logit(np.clip(p, bound, 1.0 - bound))


@dataclass
class GlmFit:
    coefficients: np.ndarray
    link: str
    intercept: bool = True
    converged: bool = True
    iterations: int = 0
    dropped: list = field(default_factory=list)
    basis_spec: dict = field(default_factory=dict)

    def linear_predictor(self, x, offset=None):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        eta = x @ self.coefficients[1:] + self.coefficients[0] if self.intercept \
            else x @ self.coefficients
        if offset is not None:
            eta = eta + offset
        return eta

    def predict(self, x, offset=None):
        eta = self.linear_predictor(x, offset)
        return expit(eta) if self.link == "logit" else eta


def _independent_columns(x, tol=1e-9):
    """Indices of a maximal linearly independent column subset (pivoted QR)."""
    if x.shape[1] == 0:
        return np.arange(0)
    _, r, piv = linalg.qr(x, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    if d.size == 0 or d[0] == 0:
        return np.arange(0)
    rank = int(np.sum(d > tol * d[0]))
    return np.sort(piv[:rank])


def fit_glm(x, y, link="logit", offset=None, weights=None, intercept=True, max_iter=100,
            tol=SCORE_TOL):
    """Fit a GLM with identity or logit link.

    The logit link accepts fractional responses in [0, 1] (quasi-binomial
    likelihood). Collinear columns are dropped with a warning and receive a
    zero coefficient. Coefficients larger than ``SEPARATION_BOUND`` in
    magnitude on the logit scale raise :class:`SeparationError`.

    Returns
    -------
    GlmFit
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    x = np.asarray(x, dtype=float).reshape(n, -1)
    if link not in ("logit", "identity"):
        raise ValueError(f"unknown link {link!r}")
    if link == "logit" and (y.min() < 0 or y.max() > 1):
        raise ValueError("logit link requires responses in [0, 1]")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    wt = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    design = np.column_stack([np.ones(n), x]) if intercept else x
    keep = _independent_columns(design * np.sqrt(wt)[:, None])
    k = design.shape[1]
    dropped = sorted(set(range(k)) - set(keep.tolist()))
    if dropped:
        warnings.warn(f"dropping {len(dropped)} collinear design column(s)", RuntimeWarning,
                      stacklevel=2)
    xd = design[:, keep]
    beta = np.zeros(k)

    if link == "identity":
        sw = np.sqrt(wt)
        b, *_ = linalg.lstsq(xd * sw[:, None], (y - off) * sw)
        beta[keep] = b
        return GlmFit(beta, link, intercept, True, 1, dropped)

    b = np.zeros(xd.shape[1])
    if intercept and 0 in keep:
        ybar = np.clip(np.average(y, weights=wt), 1e-6, 1 - 1e-6)
        b[0] = logit(ybar) - (np.average(off, weights=wt) if offset is not None else 0.0)

    def deviance(coef):
        mu = np.clip(expit(xd @ coef + off), 1e-300, 1 - 1e-16)
        return -2 * np.sum(wt * (y * np.log(mu) + (1 - y) * np.log1p(-mu)))

    dev = deviance(b)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(xd @ b + off)
        score = xd.T @ (wt * (y - mu))
        if np.max(np.abs(score)) <= tol:
            converged = True
            it -= 1
            break
        v = wt * mu * (1 - mu)
        info = xd.T @ (xd * v[:, None])
        try:
            step = linalg.solve(info, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(info, score)[0]
        t = 1.0
        while True:
            cand = b + t * step
            new_dev = deviance(cand)
            if new_dev <= dev + 1e-12 * max(1.0, abs(dev)) or t < 1e-10:
                break
            t *= 0.5
        b, dev = cand, new_dev
        if np.max(np.abs(b)) > SEPARATION_BOUND:
            full = np.zeros(k)
            full[keep] = b
            raise SeparationError("logistic coefficients exceed separation bound", full)
        if np.max(np.abs(t * step)) < 1e-13 * max(1.0, np.max(np.abs(b))):
            converged = True
            break
    if not converged:
        warnings.warn("IRLS did not converge", RuntimeWarning, stacklevel=2)
    beta[keep] = b
    return GlmFit(beta, link, intercept, converged, it, dropped)
