"""CSV ingestion, analysis configuration and report formatting."""

from __future__ import annotations

import configparser
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ctmle.data import Dataset
from ctmle.estimators import ESTIMATOR_NAMES

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


class ConfigError(ValueError):
    """Bad configuration or input layout; the CLI maps it to exit code 2."""


@dataclass
class AnalysisConfig:
    """Everything needed to rerun an analysis.

    File values are read from an INI file (sections ``[columns]``,
    ``[estimation]`` and ``[learners]``); command-line flags override them.
    """

    estimators: tuple = ("ctmle",)
    or_learner: str = "glm"
    ps_learner: str = "glm"
    smoother_df: int = 2
    folds: int = 5
    level: float = 0.95
    ps_floor: float = 1e-6
    seed: int = 0
    estimand: str = "ate"
    arm: int = 1
    treatment: str = "A"
    outcome: str = "Y"
    covariates: tuple = ()
    impute: bool = False
    multiarm: bool = False

    def __post_init__(self):
        if isinstance(self.estimators, str):
            self.estimators = tuple(s.strip() for s in self.estimators.split(",") if s.strip())
        if isinstance(self.covariates, str):
            self.covariates = tuple(s.strip() for s in self.covariates.split(",") if s.strip())
        self.estimators = tuple(self.estimators)
        self.covariates = tuple(self.covariates)
        self.validate()

    def validate(self):
        if not self.estimators:
            raise ConfigError("no estimator given")
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise ConfigError(f"unknown estimator {name!r}; choose from {ESTIMATOR_NAMES}")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if not 0 <= self.ps_floor < 0.5:
            raise ConfigError("ps floor must lie in [0, 0.5)")
        if self.smoother_df < 1:
            raise ConfigError("smoother df must be at least 1")
        if self.estimand not in ("ate", "tsm"):
            raise ConfigError("estimand must be 'ate' or 'tsm'")

    @property
    def smoother(self) -> str:
        return f"spline:df={self.smoother_df}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimators"] = list(self.estimators)
        out["covariates"] = list(self.covariates)
        return out

    @classmethod
    def from_sources(cls, path=None, overrides=None):
        """Defaults, then the INI file at ``path``, then non-``None`` overrides."""
        values = {}
        if path is not None:
            values.update(read_config_file(path))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


_SECTIONS = {
    "columns": {"treatment": str, "outcome": str, "covariates": str},
    "estimation": {"estimators": str, "folds": int, "level": float, "ps_floor": float,
                   "seed": int, "estimand": str, "arm": int, "impute": bool, "multiarm": bool},
    "learners": {"or_learner": str, "ps_learner": str, "smoother_df": int},
}


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        schema = _SECTIONS[section]
        for key in parser[section]:
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kind = schema[key]
            try:
                if kind is bool:
                    values[key] = parser.getboolean(section, key)
                else:
                    values[key] = kind(parser.get(section, key))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key} in [{section}]: {exc}") from exc
    return values


@dataclass
class IngestionReport:
    rows: int
    missing: dict
    indicator_columns: list = field(default_factory=list)
    fill_values: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _parse(cell, row, column):
    text = cell.strip()
    if text.lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"row {row}, column {column!r}: cannot parse {cell!r}") from None


def _fill_value(values):
    seen = values[~np.isnan(values)]
    if seen.size == 0:
        return None
    if np.all(np.isin(seen, (0.0, 1.0))):
        # mode for binary columns; ties go to 0
        return float(np.mean(seen) > 0.5)
    return float(np.mean(seen))


def load_csv(path, treatment="A", outcome="Y", covariates=(), impute=False, arms=None):
    """Read a CSV with a header row into a :class:`Dataset`.

    Parameters
    ----------
    path : str or path-like
    treatment, outcome : str
        Column names. Missing values in either are an error.
    covariates : sequence of str
        Covariate columns; all other columns when empty.
    impute : bool
        Fill missing covariates with the column mean (mode for 0/1 columns)
        and append a ``<name>_missing`` indicator per affected column.
        Without it, missing covariates are an error.
    arms : sequence of int, optional
        Treatment labels; defaults to the sorted observed labels.

    Returns
    -------
    Dataset, IngestionReport
    """
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise ConfigError(f"{path}: empty file") from None
            rows = [r for r in reader if any(c.strip() for c in r)]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    covariates = tuple(covariates) or tuple(h for h in header if h not in (treatment, outcome))
    for name in (treatment, outcome, *covariates):
        if name not in header:
            raise ConfigError(f"column {name!r} not found in {path}")
    if not covariates:
        raise ConfigError("no covariate columns")
    index = {h: j for j, h in enumerate(header)}
    table = {}
    for name in (treatment, outcome, *covariates):
        j = index[name]
        col = np.empty(len(rows))
        for i, r in enumerate(rows):
            if len(r) != len(header):
                raise ConfigError(f"row {i + 2}: expected {len(header)} fields, got {len(r)}")
            col[i] = _parse(r[j], i + 2, name)
        table[name] = col
    for name in (treatment, outcome):
        bad = np.flatnonzero(np.isnan(table[name]))
        if bad.size:
            raise ConfigError(f"column {name!r} has missing values (first at row {bad[0] + 2});"
                              " only covariates can be imputed")
    a = table[treatment]
    if np.any(a != np.round(a)):
        raise ConfigError(f"treatment column {treatment!r} must be integer coded")
    missing = {name: int(np.isnan(table[name]).sum()) for name in covariates}
    # imputation fills these arrays in place; indicators are appended after them
    w_cols, names = [table[c] for c in covariates], list(covariates)
    indicators, fills = [], {}
    for name in covariates:
        if not missing[name]:
            continue
        if not impute:
            raise ConfigError(f"covariate {name!r} has {missing[name]} missing values;"
                              " rerun with imputation enabled")
        col = table[name]
        fill = _fill_value(col)
        if fill is None:
            raise ConfigError(f"covariate {name!r} is entirely missing")
        flag = np.isnan(col).astype(float)
        col[np.isnan(col)] = fill
        fills[name] = fill
        w_cols.append(flag)
        names.append(f"{name}_missing")
        indicators.append(f"{name}_missing")
    a = a.astype(int)
    if arms is None:
        labels = set(a.tolist())
        arms = (0, 1) if labels <= {0, 1} else tuple(sorted(labels))
    ds = Dataset.from_raw(np.column_stack(w_cols), a, table[outcome], names=tuple(names),
                          arms=arms)
    return ds, IngestionReport(len(rows), missing, indicators, fills)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps(payload) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True)


def write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


LABELS = {"ctmle": "CTMLE", "tmle": "TMLE", "onestep": "OS", "conestep": "COS",
          "ctmle-ate": "CTMLE (direct ATE)", "cv-ctmle": "CV-CTMLE"}


def _cell(psi, ci, digits):
    return f"{psi:.{digits}f} ({ci[0]:.{digits}f}, {ci[1]:.{digits}f})"


def estimate_table(rows, columns, what, level=0.95, digits=2, p_values=None):
    """Plain-text results table: one row per method, ``estimate (lo, hi)`` cells.

    ``rows`` maps a method label to a list of ``(psi, ci)`` pairs, one per column.
    """
    header = ["Method", *columns] + (["p-value"] if p_values else [])
    body = []
    for label, cells in rows.items():
        line = [label] + [_cell(psi, ci, digits) for psi, ci in cells]
        if p_values:
            line.append(f"{p_values[label]:.3g}")
        body.append(line)
    widths = [max(len(r[j]) for r in [header, *body]) for j in range(len(header))]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    rule = "-" * len(fmt.format(*header))
    caption = f"Estimated {what} ({round(100 * level)}% confidence interval)"
    return "\n".join([caption, rule, fmt.format(*header), rule,
                      *(fmt.format(*r) for r in body), rule]) + "\n"


def simulation_table(report) -> str:
    header = ["Estimator", "bias", "variance", "mse", "rel. efficiency", "oracle cov.",
              "est. SE cov.", "failures"]
    body = []
    for name, m in report.metrics.items():
        def num(key, spec=".4g"):
            value = m.get(key)
            return "-" if value is None else format(value, spec)
        body.append([name, num("bias"), num("variance"), num("mse"),
                     num("relative_efficiency", ".3f"), num("oracle_coverage", ".3f"),
                     num("estimated_se_coverage", ".3f"),
                     str(report.failures[name]["count"])])
    widths = [max(len(r[j]) for r in [header, *body]) for j in range(len(header))]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    title = (f"{report.dgp} n={report.n}" + (f" gamma={report.gamma:g}" if report.gamma is not None
                                              else "") + f" reps={report.reps} truth={report.truth:g}")
    return "\n".join([title, fmt.format(*header), *(fmt.format(*r) for r in body)]) + "\n"
