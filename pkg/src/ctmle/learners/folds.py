"""V-fold partitions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FoldScheme:
    V: int
    assignment: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=int)
        assignment.setflags(write=False)
        object.__setattr__(self, "assignment", assignment)
        if self.V < 1:
            raise ValueError("V must be >= 1")
        if assignment.size and (assignment.min() < 0 or assignment.max() >= self.V):
            raise ValueError("fold index out of range")

    @property
    def n(self) -> int:
        return int(self.assignment.size)

    def validation(self, v):
        return np.flatnonzero(self.assignment == v)

    def training(self, v):
        return np.flatnonzero(self.assignment != v)

    def splits(self):
        for v in range(self.V):
            yield v, self.training(v), self.validation(v)

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.V)


def make_folds(n, V=5, seed=None, strata=None):
    """Random partition of ``range(n)`` into ``V`` near-equal folds.

    With ``strata`` the rows are dealt round-robin stratum by stratum, which
    balances each stratum across folds while keeping overall fold sizes
    within one of each other.
    """
    if V < 1 or V > n:
        raise ValueError(f"need 1 <= V <= n, got V={V}, n={n}")
    rng = np.random.default_rng(seed)
    if strata is None:
        order = rng.permutation(n)
    else:
        strata = np.asarray(strata)
        order = np.concatenate([rng.permutation(np.flatnonzero(strata == s))
                                for s in np.unique(strata)])
    assignment = np.empty(n, dtype=int)
    assignment[order] = np.arange(n) % V
    return FoldScheme(V, assignment, seed)
