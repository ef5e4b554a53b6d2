"""Data-generating processes, the Monte Carlo engine and performance metrics."""

from __future__ import annotations

import csv
import io
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ctmle.data import Dataset
from ctmle.estimators import ESTIMATOR_NAMES, EstimatorConfig, run_estimator
from ctmle.inference import normal_quantile

SIM1_COEF = 2.0 ** (1 - np.arange(1, 8))
SIM2_ARM_MEAN = 210 + 27.4 * 1.25


@dataclass(frozen=True)
class Sim1Config:
    n: int = 1000
    gamma: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class Sim2Config:
    n: int = 1000
    seed: int | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sim1_covariates(n, rng):
    return np.column_stack([rng.uniform(-1.5, 1.5, size=(n, 7)), rng.binomial(1, 0.5, n)])


def sim1_propensity(w, gamma):
    return expit(0.5 * gamma - gamma * w[:, 7] + w[:, :7] @ SIM1_COEF)


def sim1_outcome_mean(a, w):
    return a - w[:, :7] @ SIM1_COEF


def dgp_sim1(cfg: Sim1Config, rng=None):
    """Eight covariates, propensity pushed towards 0/1 as ``gamma`` grows, ATE = 1.

    Returns the dataset (outcome min-max scaled) and a dict of truths on the
    raw outcome scale.
    """
    rng = _rng(cfg.seed if rng is None else rng)
    w = sim1_covariates(cfg.n, rng)
    g0 = sim1_propensity(w, cfg.gamma)
    a = rng.binomial(1, g0)
    y = sim1_outcome_mean(a, w) + rng.normal(size=cfg.n)
    names = tuple(f"W{j}" for j in range(1, 9))
    ds = Dataset.from_raw(w, a, y, names=names, arms=(0, 1))
    truths = {
        "g0": g0,
        "q1": sim1_outcome_mean(1, w),
        "q0": sim1_outcome_mean(0, w),
        "psi1": 1.0,
        "psi0": 0.0,
        "ate": 1.0,
    }
    return ds, truths


def sim2_latent(n, rng):
    return np.column_stack([rng.uniform(0.5, 2.0, n), rng.uniform(-2.0, 2.0, size=(n, 4))])


def sim2_propensity(z):
    return expit(-z[:, 0] + 0.5 * z[:, 1] - z[:, 2] - 0.1 * z[:, 3] + z[:, 4]
                 + 0.75 * z[:, 4] ** 2)


def sim2_outcome_mean(z):
    return 210 + 27.4 * z[:, 0] + 13.7 * (z[:, 1] + z[:, 2] + z[:, 3])


def sim2_observed(z):
    z1, z2, z3, z4, z5 = z.T
    return np.column_stack([
        np.exp(z1 / 2),
        z2 / (1 + np.exp(z1)) + 10,
        ((z1 * z3) / 25 + 0.6) ** 3,
        (z2 + z4 + 20) ** 2,
        z5,
    ])


def dgp_sim2(cfg: Sim2Config, rng=None):
    """Kang-Schafer style design: treatment and outcome depend on latent ``z``,
    the analyst only sees nonlinear transforms ``w``. ATE = 0."""
    rng = _rng(cfg.seed if rng is None else rng)
    z = sim2_latent(cfg.n, rng)
    g0 = sim2_propensity(z)
    a = rng.binomial(1, g0)
    q = sim2_outcome_mean(z)
    y = q + rng.normal(size=cfg.n)
    names = tuple(f"W{j}" for j in range(1, 6))
    ds = Dataset.from_raw(sim2_observed(z), a, y, names=names, arms=(0, 1))
    truths = {"g0": g0, "q1": q, "q0": q, "psi1": SIM2_ARM_MEAN, "psi0": SIM2_ARM_MEAN,
              "ate": 0.0, "z": z}
    return ds, truths


def kde(samples, grid):
    """Gaussian kernel density with Silverman's rule-of-thumb bandwidth."""
    x = np.asarray(samples, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if x.size < 2:
        raise ValueError("kde needs at least two samples")
    sd = float(np.std(x, ddof=1))
    if sd == 0:
        raise ValueError("kde of zero-variance samples")
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    h = 0.9 * spread * x.size ** (-0.2)
    u = (grid[:, None] - x[None, :]) / h
    return np.exp(-0.5 * u ** 2).sum(axis=1) / (x.size * h * np.sqrt(2 * np.pi))


DEFAULT_LEARNERS = {
    "sim1": {"or_spec": "glm:link=identity", "ps_spec": "glm", "smoother_spec": "spline:df=2"},
    "sim2": {"or_spec": "hal:max_knots=3", "ps_spec": "hal:max_knots=3",
             "smoother_spec": "spline:df=2"},
}

COUNTERPART = {"ctmle": "tmle", "conestep": "onestep", "ctmle-ate": "tmle",
               "cv-ctmle": "tmle"}


def replicate_seed(base_seed, r):
    return np.random.SeedSequence([int(base_seed), int(r)])


@dataclass(frozen=True)
class McSettings:
    dgp: str
    n: int
    estimators: tuple
    gamma: float = 0.0
    estimand: str = "ate"
    or_spec: str = ""
    ps_spec: str = ""
    smoother_spec: str = ""
    variance: str = "cv"
    V: int = 5
    ps_floor: float = 1e-6
    level: float = 0.95

    def learners(self):
        base = DEFAULT_LEARNERS[self.dgp]
        return {k: getattr(self, k) or base[k] for k in base}


def run_replicate(settings: McSettings, base_seed, r):
    """One replicate: draw data and run every estimator on it.

    Returns ``{estimator: (psi, se)}`` with ``None`` for a failure.
    """
    ss = replicate_seed(base_seed, r)
    data_ss, fold_ss = ss.spawn(2)
    rng = np.random.default_rng(data_ss)
    if settings.dgp == "sim1":
        ds, _ = dgp_sim1(Sim1Config(settings.n, settings.gamma), rng)
    elif settings.dgp == "sim2":
        ds, _ = dgp_sim2(Sim2Config(settings.n), rng)
    else:
        raise ValueError(f"unknown dgp {settings.dgp!r}")
    config = EstimatorConfig(ps_floor=settings.ps_floor, level=settings.level, V=settings.V,
                             seed=int(fold_ss.generate_state(1)[0]),
                             variance=settings.variance)
    out = {}
    for name in settings.estimators:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = run_estimator(name, ds, config=config, estimand=settings.estimand,
                                    **settings.learners())
            out[name] = (float(rep.psi), float(rep.se), rep.diagnostics.get("variance_method"))
        except Exception as exc:  # recorded, excluded from metrics
            out[name] = (None, None, type(exc).__name__)
    return out


def _chunk(args):
    settings, base_seed, reps = args
    return [(r, run_replicate(settings, base_seed, r)) for r in reps]


@dataclass
class SimulationReport:
    dgp: str
    n: int
    gamma: float | None
    reps: int
    base_seed: int
    estimand: str
    truth: float
    learners: dict
    metrics: dict
    failures: dict
    kde: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)

    def to_dict(self, include_estimates=True):
        out = {
            "dgp": self.dgp, "n": self.n, "gamma": self.gamma, "reps": self.reps,
            "base_seed": self.base_seed, "estimand": self.estimand, "truth": self.truth,
            "learners": self.learners, "metrics": self.metrics, "failures": self.failures,
        }
        if include_estimates:
            out["estimates"] = self.estimates
        return out

    def to_json(self, include_estimates=True):
        return json.dumps(self.to_dict(include_estimates), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["estimator", "metric", "value"])
        for name, m in self.metrics.items():
            for key, value in m.items():
                writer.writerow([name, key, repr(value) if isinstance(value, float) else value])
        return buf.getvalue()

    def kde_csv(self, name):
        grid, dens = self.kde[name]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "density"])
        for x, d in zip(grid, dens):
            writer.writerow([repr(float(x)), repr(float(d))])
        return buf.getvalue()


def performance(estimates, ses, truth, level=0.95):
    """Bias, variance, MSE and interval coverage of Monte Carlo estimates.

    Variance uses the 1/R normalisation so that ``mse = bias**2 + variance``.
    """
    psi = np.asarray(estimates, dtype=float)
    bias = float(psi.mean() - truth)
    variance = float(np.mean((psi - psi.mean()) ** 2))
    sd = np.sqrt(variance)
    z = normal_quantile((1 + level) / 2)
    oracle = float(np.mean(np.abs(psi - truth) <= z * sd))
    metrics = {"bias": bias, "variance": variance, "mse": bias ** 2 + variance,
               "oracle_coverage": oracle, "mc_sd": float(sd)}
    ses = np.asarray(ses, dtype=float)
    if ses.size and np.all(np.isfinite(ses)):
        metrics["estimated_se_coverage"] = float(np.mean(np.abs(psi - truth) <= z * ses))
        metrics["mean_se"] = float(np.mean(ses))
    return metrics


def summarize(settings: McSettings, base_seed, reps, results, truth):
    names = settings.estimators
    estimates = {name: [] for name in names}
    ses = {name: [] for name in names}
    failures = {name: {} for name in names}
    for r in range(reps):
        for name in names:
            psi, se, info = results[r][name]
            if psi is None or not np.isfinite(psi):
                failures[name][info] = failures[name].get(info, 0) + 1
                continue
            estimates[name].append(psi)
            ses[name].append(se if se is not None else np.nan)
    metrics = {}
    curves = {}
    for name in names:
        if len(estimates[name]) < 2:
            metrics[name] = {"completed": len(estimates[name])}
            continue
        m = performance(estimates[name], ses[name], truth, settings.level)
        m["completed"] = len(estimates[name])
        metrics[name] = m
        scaled = np.sqrt(settings.n) * (np.asarray(estimates[name]) - truth)
        if np.std(scaled) > 0:
            lo, hi = scaled.min(), scaled.max()
            pad = 0.25 * (hi - lo)
            grid = np.linspace(lo - pad, hi + pad, 256)
            curves[name] = (grid, kde(scaled, grid))
    for name in names:
        if "mse" not in metrics[name]:
            continue
        ref = COUNTERPART.get(name, name)
        if ref not in metrics or "mse" not in metrics[ref]:
            ref = next(k for k in names if "mse" in metrics[k])
        metrics[name]["relative_efficiency"] = (metrics[name]["mse"] / metrics[ref]["mse"]
                                                if metrics[ref]["mse"] > 0 else float("nan"))
        metrics[name]["relative_to"] = ref
    total_failures = {name: sum(v.values()) for name, v in failures.items()}
    fail_report = {name: {"count": total_failures[name], "by_error": failures[name]}
                   for name in names}
    return SimulationReport(settings.dgp, settings.n,
                            settings.gamma if settings.dgp == "sim1" else None, reps,
                            int(base_seed), settings.estimand, truth, settings.learners(),
                            metrics, fail_report, curves, estimates)


def truth_for(dgp, estimand, arm=1):
    if dgp == "sim1":
        return 1.0 if estimand == "ate" else float(arm)
    return 0.0 if estimand == "ate" else SIM2_ARM_MEAN


def run_mc(dgp, estimators=("ctmle", "tmle"), reps=100, base_seed=0, n=100, gamma=0.0,
           workers=1, estimand="ate", **options) -> SimulationReport:
    """Monte Carlo study of ``estimators`` on one of the two simulation designs.

    Replicate ``r`` draws its data and fold assignment from a seed derived
    from ``(base_seed, r)`` only, so results do not depend on ``workers``.
    Estimator failures are counted and left out of the metrics.

    Parameters
    ----------
    dgp : {"sim1", "sim2"}
    estimators : sequence of str
        Names accepted by :func:`ctmle.estimators.run_estimator`.
    reps : int
        At least 2.
    options
        Forwarded to :class:`McSettings` (learner specs, ``variance``,
        ``V``, ``ps_floor``, ``level``).
    """
    if dgp not in ("sim1", "sim2"):
        raise ValueError(f"unknown dgp {dgp!r}")
    if reps < 2:
        raise ValueError("need at least 2 replicates")
    estimators = tuple(estimators)
    for name in estimators:
        if name not in ESTIMATOR_NAMES:
            raise ValueError(f"unknown estimator {name!r}")
    settings = McSettings(dgp, int(n), estimators, float(gamma), estimand, **options)
    workers = max(1, int(workers))
    if workers == 1:
        pairs = _chunk((settings, base_seed, range(reps)))
    else:
        chunks = [(settings, base_seed, range(i, reps, workers)) for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pairs = [p for part in pool.map(_chunk, chunks) for p in part]
    results = dict(pairs)
    return summarize(settings, base_seed, reps, results, truth_for(dgp, estimand))
