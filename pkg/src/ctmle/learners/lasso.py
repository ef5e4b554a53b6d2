"""L1-penalized logistic regression by proximal Newton with coordinate descent.

Objective, for responses in [0, 1]::

    -(1/n) sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)] + lambda * sum_j |beta_j|

with an unpenalized intercept. Columns are not standardized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

from ctmle.learners.folds import FoldScheme, make_folds

KKT_TOL = 1e-6


@njit(cache=True)
def _cd_pass(X, v, r, beta, b0, lam, xv2, idx):
    n = X.shape[0]
    sumv = 0.0
    sr = 0.0
    for i in range(n):
        sumv += v[i]
        sr += v[i] * r[i]
    shift = sr / sumv
    b0 += shift
    for i in range(n):
        r[i] -= shift
    biggest = abs(shift) * sumv / n
    for jj in range(idx.shape[0]):
        j = idx[jj]
        if xv2[j] <= 0.0:
            continue
        g = 0.0
        for i in range(n):
            g += v[i] * X[i, j] * r[i]
        g = g / n + xv2[j] * beta[j]
        if g > lam:
            new = (g - lam) / xv2[j]
        elif g < -lam:
            new = (g + lam) / xv2[j]
        else:
            new = 0.0
        delta = new - beta[j]
        if delta != 0.0:
            for i in range(n):
                r[i] -= delta * X[i, j]
            beta[j] = new
            ch = xv2[j] * abs(delta)
            if ch > biggest:
                biggest = ch
    return b0, biggest


@njit(cache=True)
def _wls_lasso(X, v, z, beta, b0, lam, tol, max_sweeps):
    """Coordinate descent for (1/2n) sum v (z - b0 - X beta)^2 + lam |beta|_1.

    Stops when no coordinate moves its partial gradient by more than ``tol``.
    """
    n, p = X.shape
    xv2 = np.zeros(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += v[i] * X[i, j] * X[i, j]
        xv2[j] = s / n
    r = z - b0 - X @ beta
    everything = np.arange(p)
    sweeps = 0
    while sweeps < max_sweeps:
        b0, biggest = _cd_pass(X, v, r, beta, b0, lam, xv2, everything)
        sweeps += 1
        if biggest < tol:
            break
        active = np.flatnonzero(beta != 0.0)
        while sweeps < max_sweeps:
            b0, biggest = _cd_pass(X, v, r, beta, b0, lam, xv2, active)
            sweeps += 1
            if biggest < tol:
                break
    return b0, sweeps


@njit(cache=True)
def _gram_lasso(G, c, beta, lam, tol, max_sweeps):
    """Coordinate descent for (1/2) b'Gb - c'b + lam |b|_1 on a precomputed Gram matrix.

    Same stopping rule as ``_wls_lasso``; a sweep costs p^2 instead of n p.
    """
    p = G.shape[0]
    grad = c - G @ beta
    sweeps = 0
    active_only = False
    while sweeps < max_sweeps:
        biggest = 0.0
        for j in range(p):
            if active_only and beta[j] == 0.0:
                continue
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            g = grad[j] + gjj * beta[j]
            if g > lam:
                new = (g - lam) / gjj
            elif g < -lam:
                new = (g + lam) / gjj
            else:
                new = 0.0
            delta = new - beta[j]
            if delta != 0.0:
                for k in range(p):
                    grad[k] -= delta * G[k, j]
                beta[j] = new
                ch = gjj * abs(delta)
                if ch > biggest:
                    biggest = ch
        sweeps += 1
        if biggest < tol:
            if not active_only:
                break
            active_only = False
        else:
            active_only = True
    return sweeps


# above this many columns the p x p Gram matrix costs more than it saves
GRAM_MAX_COLUMNS = 500


def _newton_direction(x, xf, v, z, beta, b0, lam, tol):
    n, p = x.shape
    new_beta = beta.copy()
    if 0 < p <= GRAM_MAX_COLUMNS:
        # intercept profiled out by weighted centering
        sv = v.sum()
        xbar = v @ x / sv
        zbar = float(v @ z / sv)
        xc = x - xbar
        vx = xc * v[:, None]
        G = np.ascontiguousarray(vx.T @ xc / n)
        c = vx.T @ (z - zbar) / n
        _gram_lasso(G, c, new_beta, lam, tol, 100000)
        return zbar - float(xbar @ new_beta), new_beta
    new_b0, _ = _wls_lasso(xf, v, z, new_beta, b0, lam, tol, 100000)
    return new_b0, new_beta


def _nll(y, eta):
    # mean negative log-likelihood, stable for large |eta|
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def lasso_objective(x, y, intercept, coefficients, lam):
    eta = intercept + np.asarray(x) @ coefficients
    return _nll(np.asarray(y, dtype=float), eta) + lam * float(np.sum(np.abs(coefficients)))


def kkt_residual(x, y, intercept, coefficients, lam):
    """Largest violation of the lasso optimality conditions."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p = expit(intercept + x @ coefficients)
    grad = x.T @ (y - p) / y.size
    active = coefficients != 0
    viol = np.where(active, np.abs(grad - lam * np.sign(coefficients)),
                    np.maximum(np.abs(grad) - lam, 0.0))
    return float(max(abs(np.mean(y - p)), viol.max(initial=0.0)))


def lambda_max(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.max(np.abs(x.T @ (y - y.mean()))) / y.size) if x.shape[1] else 0.0


@dataclass
class LassoFit:
    coefficients: np.ndarray
    lam: float
    intercept: float
    kkt_residual: float
    converged: bool = True
    cv_risk: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def linear_predictor(self, x):
        return self.intercept + np.asarray(x, dtype=float) @ self.coefficients

    def predict(self, x):
        return expit(self.linear_predictor(x))


def _solve(x, y, lam, b0, beta, tol=1e-9, max_outer=100, record=None):
    """Proximal Newton iterations at a single penalty, warm-started."""
    xf = np.asfortranarray(x)
    beta = beta.copy()

    def objective(c0, c):
        return _nll(y, c0 + x @ c) + lam * np.sum(np.abs(c))

    obj = objective(b0, beta)
    if record is not None:
        record.append(obj)
    kkt = kkt_residual(x, y, b0, beta, lam)
    for _ in range(max_outer):
        if kkt <= tol:
            break
        eta = b0 + x @ beta
        p = expit(eta)
        v = np.maximum(p * (1 - p), 1e-5)
        z = eta + (y - p) / v
        # inexact Newton: inner accuracy tracks the outer residual
        inner_tol = max(0.1 * tol, 1e-3 * kkt)
        new_b0, new_beta = _newton_direction(x, xf, v, z, beta, b0, lam, inner_tol)
        d0, d = new_b0 - b0, new_beta - beta
        t = 1.0
        while True:
            cand0, cand = b0 + t * d0, beta + t * d
            new_obj = objective(cand0, cand)
            if new_obj <= obj or t < 1e-8:
                break
            t *= 0.5
        if new_obj > obj:
            break
        b0, beta, obj = cand0, cand, new_obj
        # soft-thresholded coordinates may be left tiny by a damped step
        if t < 1.0:
            beta[np.abs(beta) < 1e-14] = 0.0
            obj = objective(b0, beta)
        if record is not None:
            record.append(obj)
        kkt = kkt_residual(x, y, b0, beta, lam)
    return b0, beta, kkt


def lasso_path(x, y, lambdas, tol=1e-9):
    """Fits along a decreasing penalty grid with warm starts."""
    x = np.ascontiguousarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    b0 = float(np.log(ybar / (1 - ybar)))
    beta = np.zeros(x.shape[1])
    fits = []
    for lam in lambdas:
        b0, beta, kkt = _solve(x, y, lam, b0, beta, tol=tol)
        fits.append((b0, beta.copy(), kkt))
    return fits


def default_lambda_grid(x, y, n_lambda=30, ratio=1e-3):
    top = lambda_max(x, y)
    if top <= 0:
        return np.array([0.0])
    return top * np.logspace(0.0, np.log10(ratio), n_lambda)


def fit_lasso_logistic(x, y, lambda_grid=None, folds: FoldScheme | None = None, seed=0,
                       tol=1e-9):
    """Lasso logistic regression with the penalty chosen by V-fold CV.

    Parameters
    ----------
    x : array_like, shape (n, p)
    y : array_like
        Responses in [0, 1].
    lambda_grid : sequence of float, optional
        Penalties; sorted into decreasing order. A single value skips CV.
        Defaults to 30 log-spaced values from ``lambda_max`` down by 1e-3.
    folds : FoldScheme, optional
        Partition for the CV risk; 5 random folds when omitted.

    Returns
    -------
    LassoFit
    """
    x = np.ascontiguousarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.min() < 0 or y.max() > 1:
        raise ValueError("responses must lie in [0, 1]")
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(x, y)
    grid = np.sort(np.asarray(lambda_grid, dtype=float).ravel())[::-1]
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if np.any(grid < 0):
        raise ValueError("penalties must be non-negative")

    cv_risk = {}
    if grid.size == 1:
        best = 0
    else:
        if folds is None:
            folds = make_folds(y.size, min(5, y.size), seed)
        risk = np.zeros(grid.size)
        for _, train, valid in folds.splits():
            path = lasso_path(x[train], y[train], grid, tol=1e-7)
            for k, (c0, c, _) in enumerate(path):
                risk[k] += _nll(y[valid], c0 + x[valid] @ c) * valid.size
        risk /= y.size
        best = int(np.argmin(risk))
        cv_risk = dict(zip(grid.tolist(), risk.tolist()))

    history = []
    path = lasso_path(x, y, grid[: best + 1], tol=tol)
    b0, beta, kkt = path[-1]
    if kkt > KKT_TOL:
        # final polish at the chosen penalty
        b0, beta, kkt = _solve(x, y, grid[best], b0, beta, tol=tol, max_outer=500,
                               record=history)
    converged = kkt <= KKT_TOL
    if not converged:
        warnings.warn(f"lasso KKT residual {kkt:.2e} above tolerance", RuntimeWarning,
                      stacklevel=2)
    return LassoFit(beta, float(grid[best]), float(b0), kkt, converged, cv_risk, history)
