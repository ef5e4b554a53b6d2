"""Named learner specifications, discrete CV selection and cross-fitting."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ctmle.learners.folds import FoldScheme, make_folds
from ctmle.learners.glm import fit_glm
from ctmle.learners.hal import HalBasis
from ctmle.learners.lasso import default_lambda_grid, fit_lasso_logistic
from ctmle.learners.splines import NaturalSplineBasis

LEARNERS = ("mean", "glm", "spline", "hal", "saturated", "sl")


class LearnerError(RuntimeError):
    pass


def _coerce(value):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


@dataclass(frozen=True)
class LearnerSpec:
    """A learner by name plus hyperparameters, e.g. ``LearnerSpec("spline", {"df": 2})``."""

    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in LEARNERS:
            raise ValueError(f"unknown learner {self.name!r}; choose from {LEARNERS}")

    @classmethod
    def parse(cls, text):
        """Parse ``name`` or ``name:key=value,key=value``.

        The ``sl`` learner takes ``candidates`` as ``+``-separated names,
        e.g. ``sl:candidates=glm+mean+hal``.
        """
        if isinstance(text, LearnerSpec):
            return text
        name, _, rest = str(text).strip().partition(":")
        params = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            params[key.strip()] = _coerce(value.strip())
        if name == "sl" and "candidates" in params:
            params["candidates"] = tuple(cls.parse(c) for c in str(params["candidates"]).split("+"))
        return cls(name, params)

    def __str__(self):
        if not self.params:
            return self.name
        parts = []
        for k, v in self.params.items():
            if k == "candidates":
                v = "+".join(str(c) for c in v)
            parts.append(f"{k}={v}")
        return f"{self.name}:{','.join(parts)}"

    def get(self, key, default=None):
        return self.params.get(key, default)


class FittedLearner:
    """Base for fitted regressions; ``predict`` returns conditional means."""

    spec: LearnerSpec

    def predict(self, x):
        raise NotImplementedError


class _Mean(FittedLearner):
    def __init__(self, spec, y):
        self.spec = spec
        self.value = float(np.mean(y))

    def predict(self, x):
        return np.full(np.asarray(x).shape[0], self.value)


class _Glm(FittedLearner):
    def __init__(self, spec, x, y, link):
        self.spec = spec
        self.fit = fit_glm(x, y, link=link)

    def predict(self, x):
        return self.fit.predict(x)


class _Spline(FittedLearner):
    """Additive natural splines in every column, fitted as a GLM."""

    def __init__(self, spec, x, y, link):
        self.spec = spec
        df = int(spec.get("df", 2))
        self.bases = []
        for j in range(x.shape[1]):
            if np.unique(x[:, j]).size < 2:
                self.bases.append(None)
                continue
            self.bases.append(NaturalSplineBasis(df).fit(x[:, j]))
        self.fit = fit_glm(self._design(x), y, link=link)

    def _design(self, x):
        cols = [b.transform(x[:, j]) for j, b in enumerate(self.bases) if b is not None]
        return np.column_stack(cols) if cols else np.empty((x.shape[0], 0))

    def predict(self, x):
        return self.fit.predict(self._design(np.asarray(x, dtype=float).reshape(len(x), -1)))


class _Hal(FittedLearner):
    # always a logistic lasso, whatever link is requested
    def __init__(self, spec, x, y, link, seed):
        self.spec = spec
        self.basis = HalBasis(int(spec.get("max_interaction", 2)),
                              int(spec.get("max_knots", 10)),
                              int(spec.get("max_columns", 5000))).fit(x)
        design = self.basis.transform(x)
        if np.min(y) < 0 or np.max(y) > 1:
            raise LearnerError("hal learner needs responses in [0, 1]")
        n_lambda = int(spec.get("n_lambda", 20))
        grid = default_lambda_grid(design, y, n_lambda=n_lambda,
                                   ratio=float(spec.get("lambda_ratio", 1e-2)))
        self.fit = fit_lasso_logistic(design, y, grid, seed=seed)

    def predict(self, x):
        return self.fit.predict(self.basis.transform(x))


class _Saturated(FittedLearner):
    """Cell means over distinct covariate patterns; unseen patterns get the overall mean."""

    def __init__(self, spec, x, y):
        self.spec = spec
        keys = [row.tobytes() for row in np.ascontiguousarray(x)]
        sums, counts = {}, {}
        for k, yi in zip(keys, y):
            sums[k] = sums.get(k, 0.0) + yi
            counts[k] = counts.get(k, 0) + 1
        self.cells = {k: sums[k] / counts[k] for k in sums}
        self.overall = float(np.mean(y))

    def predict(self, x):
        x = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(len(x), -1))
        return np.array([self.cells.get(row.tobytes(), self.overall) for row in x])


class _DiscreteSL(FittedLearner):
    def __init__(self, spec, x, y, link, seed):
        self.spec = spec
        candidates = spec.get("candidates") or (LearnerSpec("glm"), LearnerSpec("mean"))
        V = min(int(spec.get("V", 5)), len(y))
        folds = make_folds(len(y), V, seed)
        loss = "nll" if link == "logit" else "squared"
        self.chosen, self.risk_table = cv_select(candidates, x, y, folds, loss, link=link,
                                                 seed=seed)
        self.inner = fit_learner(self.chosen, x, y, link=link, seed=seed)

    def predict(self, x):
        return self.inner.predict(x)


def fit_learner(spec, x, y, link="logit", seed=0) -> FittedLearner:
    """Fit ``spec`` to ``(x, y)``.

    ``link`` is the default for GLM-type learners; a ``link`` entry in the
    spec's parameters overrides it.
    """
    spec = LearnerSpec.parse(spec)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    if y.size == 0:
        raise LearnerError(f"no rows to fit learner {spec}")
    link = spec.get("link", link)
    if spec.name == "mean":
        return _Mean(spec, y)
    if spec.name == "glm":
        return _Glm(spec, x, y, link)
    if spec.name == "spline":
        return _Spline(spec, x, y, link)
    if spec.name == "hal":
        return _Hal(spec, x, y, link, seed)
    if spec.name == "saturated":
        return _Saturated(spec, x, y)
    return _DiscreteSL(spec, x, y, link, seed)


def _loss(kind, y, pred):
    if kind == "squared":
        return float(np.mean((y - pred) ** 2))
    p = np.clip(pred, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def cv_select(candidates, x, y, folds: FoldScheme, loss="nll", link="logit", seed=0):
    """Choose the candidate with the smallest V-fold cross-validated risk.

    A candidate that raises on any fold gets infinite risk. Ties go to the
    earliest candidate.

    Returns
    -------
    chosen : LearnerSpec
    table : list of dict
        One row per candidate with ``learner``, ``risk`` and ``fold_risks``.
    """
    candidates = [LearnerSpec.parse(c) for c in candidates]
    if not candidates:
        raise LearnerError("cv_select needs at least one candidate")
    if loss not in ("nll", "squared"):
        raise ValueError(f"unknown loss {loss!r}")
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    table = []
    for spec in candidates:
        fold_risks = []
        for _, train, valid in folds.splits():
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    fitted = fit_learner(spec, x[train], y[train], link=link, seed=seed)
                    pred = fitted.predict(x[valid])
                risk = _loss(loss, y[valid], pred)
                if not np.isfinite(risk):
                    risk = np.inf
            except Exception:
                risk = np.inf
            fold_risks.append(risk)
        sizes = folds.sizes()
        total = float(np.dot(fold_risks, sizes) / sizes.sum()) if np.all(np.isfinite(fold_risks)) \
            else np.inf
        table.append({"learner": str(spec), "risk": total, "fold_risks": fold_risks})
    risks = np.array([row["risk"] for row in table])
    if not np.any(np.isfinite(risks)):
        raise LearnerError("every candidate learner failed")
    return candidates[int(np.argmin(risks))], table


def cross_fit(spec, x, y, folds: FoldScheme, link="logit", mask=None, seed=0):
    """Out-of-fold predictions: row i is predicted by a fit that excluded fold(i).

    ``mask`` restricts the training rows (e.g. treated units only); the
    prediction still covers every row.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    mask = np.ones(y.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.empty(y.size)
    for v, train, valid in folds.splits():
        train = train[mask[train]]
        if train.size == 0:
            raise LearnerError(f"fold {v}: no eligible training rows")
        fitted = fit_learner(spec, x[train], y[train], link=link, seed=seed)
        out[valid] = fitted.predict(x[valid])
    return out
