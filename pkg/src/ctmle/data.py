"""Observed-data records, outcome scaling and dataset validation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np


class DataError(ValueError):
    """Raised when a dataset violates its structural invariants."""


@dataclass(frozen=True)
class OutcomeScale:
    """Affine map taking raw outcomes to the unit interval.

    Stored outcomes are ``(y_raw - y_min) / (y_max - y_min)``. When
    ``applied`` is False the stored outcomes are the raw ones (or the
    constant 0.5 when ``degenerate`` is set).
    """

    y_min: float = 0.0
    y_max: float = 1.0
    applied: bool = False
    degenerate: bool = False

    @property
    def width(self) -> float:
        return self.y_max - self.y_min if self.applied else 1.0

    def to_dict(self) -> dict:
        return {"y_min": self.y_min, "y_max": self.y_max, "applied": self.applied,
                "degenerate": self.degenerate}


def scale_outcome(y_raw, keep_unit_interval: bool = False):
    """Min-max scale outcomes into [0, 1].

    Parameters
    ----------
    y_raw : array_like
        Finite outcome values, at least one.
    keep_unit_interval : bool
        Leave outcomes untouched when they already lie in [0, 1].

    Returns
    -------
    y_scaled : ndarray
    scale : OutcomeScale
    """
    y = np.asarray(y_raw, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise DataError("outcome must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(y)):
        raise DataError("outcome contains non-finite values")
    lo, hi = float(y.min()), float(y.max())
    if keep_unit_interval and lo >= 0.0 and hi <= 1.0:
        return y.copy(), OutcomeScale(0.0, 1.0, applied=False)
    if hi <= lo:
        warnings.warn("degenerate outcome: all values equal", RuntimeWarning, stacklevel=2)
        return np.full_like(y, 0.5), OutcomeScale(lo, hi, applied=False, degenerate=True)
    scaled = (y - lo) / (hi - lo)
    return np.clip(scaled, 0.0, 1.0), OutcomeScale(lo, hi, applied=True)


def unscale_estimate(psi_scaled: float, scale: OutcomeScale, difference: bool = False) -> float:
    """Map an estimate on the unit scale back to the raw outcome scale.

    With ``difference=True`` the estimate is a contrast of two means, so
    only the slope of the affine map applies.
    """
    if not scale.applied:
        if scale.degenerate and not difference:
            return scale.y_min + (psi_scaled - 0.5)
        return float(psi_scaled)
    if difference:
        return float(psi_scaled * (scale.y_max - scale.y_min))
    return float(psi_scaled * (scale.y_max - scale.y_min) + scale.y_min)


def _frozen(x, dtype) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Covariates ``w`` (n x p), integer treatment ``a`` and unit-scale outcome ``y``."""

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    y_scale: OutcomeScale = field(default_factory=OutcomeScale)
    names: tuple = ()
    arms: tuple = (0, 1)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        object.__setattr__(self, "w", _frozen(w, float))
        object.__setattr__(self, "a", _frozen(self.a, int))
        object.__setattr__(self, "y", _frozen(self.y, float))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"W{j + 1}" for j in range(w.shape[1])))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "arms", tuple(int(k) for k in self.arms))
        n = self.w.shape[0]
        if self.a.shape != (n,) or self.y.shape != (n,):
            raise DataError(f"row mismatch: w has {n} rows, a {self.a.shape}, y {self.y.shape}")
        if len(self.names) != self.w.shape[1]:
            raise DataError("covariate names do not match column count")
        if n and (np.any(np.isnan(self.w)) or np.any(np.isnan(self.y))):
            raise DataError("dataset contains missing values")
        if n and (self.y.min() < 0.0 or self.y.max() > 1.0):
            raise DataError("stored outcomes must lie in [0, 1]")
        bad = set(np.unique(self.a).tolist()) - set(self.arms)
        if bad:
            raise DataError(f"treatment labels {sorted(bad)} outside declared arms {self.arms}")

    @classmethod
    def from_raw(cls, w, a, y_raw, names=(), arms=None, keep_unit_interval=False):
        """Build a dataset from raw outcomes, scaling them into [0, 1]."""
        y, scale = scale_outcome(y_raw, keep_unit_interval=keep_unit_interval)
        a = np.asarray(a, dtype=int)
        if arms is None:
            arms = tuple(range(max(int(a.max()) + 1, 2))) if a.size else (0, 1)
        return cls(w=w, a=a, y=y, y_scale=scale, names=tuple(names), arms=tuple(arms))

    @property
    def n(self) -> int:
        return int(self.w.shape[0])

    @property
    def p(self) -> int:
        return int(self.w.shape[1])

    @property
    def y_raw(self) -> np.ndarray:
        s = self.y_scale
        if s.applied:
            return self.y * (s.y_max - s.y_min) + s.y_min
        return np.asarray(self.y)

    def indicator(self, arm: int) -> np.ndarray:
        return (self.a == arm).astype(int)

    def as_binary(self, arm: int = 1) -> "Dataset":
        """Relabel so that ``arm`` becomes treatment 1 and every other arm 0."""
        return replace(self, a=self.indicator(arm), arms=(0, 1))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, w=self.w[idx], a=self.a[idx], y=self.y[idx])


@dataclass
class ValidationReport:
    n: int
    arm_counts: dict
    empty_arms: list
    zero_variance_columns: list
    warnings: list

    @property
    def ok(self) -> bool:
        return not self.empty_arms


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Summarise arm counts and degenerate columns without touching ``ds``."""
    if ds.n == 0:
        raise DataError("empty dataset")
    labels, counts = np.unique(ds.a, return_counts=True)
    observed = dict(zip(labels.tolist(), counts.tolist()))
    arm_counts = {k: int(observed.get(k, 0)) for k in ds.arms}
    empty = [k for k, c in arm_counts.items() if c == 0]
    zero_var = [ds.names[j] for j in range(ds.p) if np.ptp(ds.w[:, j]) == 0]
    msgs = [f"arm {k} empty" for k in empty]
    msgs += [f"covariate {name} has zero variance" for name in zero_var]
    if ds.y_scale.degenerate:
        msgs.append("outcome is constant")
    return ValidationReport(ds.n, arm_counts, empty, zero_var, msgs)
