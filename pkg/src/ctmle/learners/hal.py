"""Zero-order indicator basis used by the lasso stand-in for highly adaptive lasso."""

from __future__ import annotations

import itertools
import warnings

import numpy as np


class HalBasis:
    """Indicator columns ``1{w_j >= knot}`` and their products over covariate subsets.

    Knots sit at empirical quantiles of each covariate (the minimum is
    excluded since it gives a constant column). Columns that duplicate an
    earlier column on the fitting data are removed.
    """

    def __init__(self, max_interaction=2, max_knots_per_dim=10, max_columns=5000):
        if max_interaction < 1:
            raise ValueError("max_interaction must be >= 1")
        self.max_interaction = int(max_interaction)
        self.max_knots_per_dim = int(max_knots_per_dim)
        self.max_columns = int(max_columns)
        self.knots = None
        self.terms = None
        self.keep = None

    @staticmethod
    def _knots(col, k):
        probs = np.arange(1, k + 1) / (k + 1)
        q = np.unique(np.quantile(col, probs, method="inverted_cdf"))
        return q[q > col.min()]

    def _count(self, knots):
        p = len(knots)
        total = 0
        for order in range(1, min(self.max_interaction, p) + 1):
            for subset in itertools.combinations(range(p), order):
                total += int(np.prod([len(knots[j]) for j in subset]))
        return total

    def fit(self, w):
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        k = self.max_knots_per_dim
        knots = [self._knots(w[:, j], k) for j in range(w.shape[1])]
        while self._count(knots) > self.max_columns and k > 1:
            k -= 1
            knots = [self._knots(w[:, j], k) for j in range(w.shape[1])]
        if k < self.max_knots_per_dim:
            warnings.warn(f"column budget {self.max_columns} exceeded; using {k} knots per "
                          "covariate", RuntimeWarning, stacklevel=2)
        self.knots = knots
        p = w.shape[1]
        terms = []
        for order in range(1, min(self.max_interaction, p) + 1):
            for subset in itertools.combinations(range(p), order):
                for cut in itertools.product(*[knots[j] for j in subset]):
                    terms.append((subset, cut))
        self.terms = terms
        raw = self._raw(w)
        seen = set()
        keep = []
        for c in range(raw.shape[1]):
            key = np.packbits(raw[:, c]).tobytes()
            if key in seen:
                continue
            seen.add(key)
            keep.append(c)
        self.keep = np.asarray(keep, dtype=int)
        return self

    def _raw(self, w):
        n = w.shape[0]
        out = np.empty((n, len(self.terms)), dtype=bool)
        for c, (subset, cut) in enumerate(self.terms):
            col = np.ones(n, dtype=bool)
            for j, t in zip(subset, cut):
                col &= w[:, j] >= t
            out[:, c] = col
        return out

    def transform(self, w):
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        return self._raw(w)[:, self.keep].astype(float)

    def fit_transform(self, w):
        return self.fit(w).transform(w)

    @property
    def n_columns(self):
        return 0 if self.keep is None else int(self.keep.size)

    def describe(self):
        return {"basis": "hal_lite", "max_interaction": self.max_interaction,
                "knots_per_dim": [len(k) for k in self.knots or []], "columns": self.n_columns}


def hal_lite_basis(w, max_interaction=2, max_knots_per_dim=10, max_columns=5000):
    """Return ``(design, basis)`` for the indicator basis of ``w``."""
    basis = HalBasis(max_interaction, max_knots_per_dim, max_columns)
    return basis.fit_transform(w), basis
