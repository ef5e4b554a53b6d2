"""Natural cubic spline bases."""

from __future__ import annotations

import warnings

import numpy as np


class NaturalSplineBasis:
    """Natural cubic spline basis with knots at empirical quantiles.

    Spans the same space as R's ``ns(x, df)``: ``df - 1`` interior knots at
    the ``k/df`` quantiles plus boundary knots at the range of ``x``. The
    truncated-power form is used, so the basis is linear outside the
    boundary knots. Columns are centred and whitened on the fitting data
    (same span, unit-variance orthogonal columns) so that coefficient size
    reflects the fit rather than the basis scale. No intercept column is
    produced.
    """

    def __init__(self, df=2):
        if df < 1:
            raise ValueError("df must be >= 1")
        self.df = int(df)
        self.knots = None
        self.center = None
        self.whiten = None

    def fit(self, x):
        x = np.asarray(x, dtype=float).ravel()
        distinct = np.unique(x)
        if distinct.size < 2:
            raise ValueError("natural spline basis needs at least two distinct values")
        df = self.df
        if distinct.size < df + 1:
            warnings.warn(f"only {distinct.size} distinct values; reducing df from {df} to "
                          f"{distinct.size - 1}", RuntimeWarning, stacklevel=2)
            df = distinct.size - 1
        interior = np.quantile(x, np.arange(1, df) / df) if df > 1 else np.empty(0)
        knots = np.unique(np.concatenate([[x.min()], interior, [x.max()]]))
        if knots.size < df + 1:
            warnings.warn(f"tied quantile knots; reducing df to {knots.size - 1}",
                          RuntimeWarning, stacklevel=2)
        self.knots = knots
        self.df = knots.size - 1
        raw = self._raw(x)
        self.center = raw.mean(axis=0)
        r = np.linalg.qr(raw - self.center, mode="r")
        d = np.abs(np.diag(r))
        if d.min() > 1e-10 * d.max():
            self.whiten = np.linalg.inv(r) * np.sqrt(x.size)
        else:
            # nearly collinear columns: scale only
            self.whiten = np.diag(1.0 / np.maximum(raw.std(axis=0), 1e-300))
        return self

    def transform(self, x):
        if self.knots is None:
            raise RuntimeError("basis not fitted")
        return (self._raw(x) - self.center) @ self.whiten

    def _raw(self, x):
        x = np.asarray(x, dtype=float).ravel()
        lo, hi = self.knots[0], self.knots[-1]
        u = (x - lo) / (hi - lo)
        xi = (self.knots - lo) / (hi - lo)
        cols = [u]
        last = xi[-1]

        def d(k):
            return (np.maximum(u - xi[k], 0) ** 3 - np.maximum(u - last, 0) ** 3) / (last - xi[k])

        d_end = d(xi.size - 2)
        for k in range(xi.size - 2):
            cols.append(d(k) - d_end)
        return np.column_stack(cols)

    def fit_transform(self, x):
        return self.fit(x).transform(x)

    def describe(self):
        return {"basis": "natural_spline", "df": self.df,
                "knots": None if self.knots is None else self.knots.tolist()}


def natural_spline_basis(x, df=2):
    """Return the n x df natural cubic spline design for ``x``."""
    return NaturalSplineBasis(df).fit_transform(x)
