import csv
import json

import numpy as np
import pytest
from scipy.special import expit

from ctmle.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from ctmle.inference import wald_test_equal_means
from ctmle.io import (AnalysisConfig, ConfigError, dumps, estimate_table, load_csv,
                      read_config_file)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


@pytest.fixture
def binary_csv(tmp_path):
    rng = np.random.default_rng(5)
    n = 200
    w = rng.normal(size=(n, 2))
    a = rng.binomial(1, expit(w[:, 0]))
    y = 2 + a + w[:, 0] + rng.normal(size=n)
    rows = [[f"{w[i, 0]:.6f}", f"{w[i, 1]:.6f}", a[i], f"{y[i]:.6f}"] for i in range(n)]
    return write_csv(tmp_path / "binary.csv", ["W1", "W2", "A", "Y"], rows)


@pytest.fixture
def three_arm_csv(tmp_path):
    rng = np.random.default_rng(6)
    n = 450
    w = rng.normal(size=n)
    a = rng.integers(0, 3, n)
    y = 0.4 * a + w + rng.normal(size=n)
    rows = [[f"{w[i]:.6f}", a[i], f"{y[i]:.6f}"] for i in range(n)]
    return write_csv(tmp_path / "arms.csv", ["W1", "A", "Y"], rows)


class TestLoadCsv:
    def test_no_missing(self, binary_csv):
        ds, report = load_csv(binary_csv)
        assert ds.w.shape == (200, 2)
        assert report.indicator_columns == [] and report.missing == {"W1": 0, "W2": 0}

    def test_mean_imputation(self, tmp_path):
        x = [1.0, 2.0, None, 4.0, 5.0, None, 7.0, 8.0, 9.0, 10.0]
        rows = [["" if v is None else v, i % 2, 0.1 * i] for i, v in enumerate(x)]
        path = write_csv(tmp_path / "m.csv", ["X", "A", "Y"], rows)
        ds, report = load_csv(path, impute=True)
        observed_mean = (1 + 2 + 4 + 5 + 7 + 8 + 9 + 10) / 8
        assert report.fill_values == {"X": observed_mean}
        assert report.missing == {"X": 2}
        assert ds.names == ("X", "X_missing")
        np.testing.assert_array_equal(ds.w[:, 1], [0, 0, 1, 0, 0, 1, 0, 0, 0, 0])
        assert ds.w[2, 0] == ds.w[5, 0] == observed_mean

    def test_mode_imputation_for_binary(self, tmp_path):
        rows = [[v, i % 2, 0.1 * i] for i, v in enumerate([1, 1, 0, "NA", 1])]
        ds, report = load_csv(write_csv(tmp_path / "b.csv", ["X", "A", "Y"], rows),
                              impute=True)
        assert report.fill_values == {"X": 1.0}

    def test_missing_covariate_without_imputation(self, tmp_path):
        rows = [["", 0, 0.1], [1, 1, 0.2]]
        with pytest.raises(ConfigError, match="imputation"):
            load_csv(write_csv(tmp_path / "c.csv", ["X", "A", "Y"], rows))

    def test_missing_outcome(self, tmp_path):
        rows = [[1, 0, ""], [2, 1, 0.2]]
        with pytest.raises(ConfigError, match="'Y'"):
            load_csv(write_csv(tmp_path / "d.csv", ["X", "A", "Y"], rows), impute=True)

    def test_unparseable_cell_names_row_and_column(self, tmp_path):
        rows = [[1, 0, 0.1], ["abc", 1, 0.2]]
        with pytest.raises(ConfigError, match="row 3, column 'X'"):
            load_csv(write_csv(tmp_path / "e.csv", ["X", "A", "Y"], rows))

    def test_unknown_column(self, binary_csv):
        with pytest.raises(ConfigError, match="'Z'"):
            load_csv(binary_csv, covariates=("W1", "Z"))

    def test_non_integer_treatment(self, tmp_path):
        rows = [[1, 0.5, 0.1], [2, 1, 0.2]]
        with pytest.raises(ConfigError):
            load_csv(write_csv(tmp_path / "f.csv", ["X", "A", "Y"], rows))

    def test_multiarm_labels(self, three_arm_csv):
        ds, _ = load_csv(three_arm_csv)
        assert ds.arms == (0, 1, 2)


class TestConfig:
    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[columns]\ntreatment = T\n\n[estimation]\nfolds = 3\nseed = 4\n"
                        "\n[learners]\nsmoother_df = 3\n")
        cfg = AnalysisConfig.from_sources(path, {"seed": 9, "level": None})
        assert (cfg.treatment, cfg.folds, cfg.seed, cfg.level) == ("T", 3, 9, 0.95)
        assert cfg.smoother == "spline:df=3"

    @pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[estimation]\nfoo = 1\n",
                                      "[estimation]\nfolds = many\n"])
    def test_bad_file(self, tmp_path, text):
        path = tmp_path / "bad.ini"
        path.write_text(text)
        with pytest.raises(ConfigError):
            read_config_file(path)

    @pytest.mark.parametrize("kwargs", [{"folds": 1}, {"level": 1.0}, {"estimators": "aipw"},
                                        {"estimand": "att"}])
    def test_invalid_values(self, kwargs):
        with pytest.raises(ConfigError):
            AnalysisConfig(**kwargs)

    def test_round_trip(self):
        cfg = AnalysisConfig(estimators="ctmle,tmle", covariates="W1,W2")
        assert AnalysisConfig(**json.loads(dumps(cfg.to_dict()))) == cfg


class TestTables:
    def test_layout(self):
        text = estimate_table({"CTMLE": [(1.234, (1.0, 1.5))]}, ["ATE"],
                              "average treatment effect")
        lines = text.splitlines()
        assert lines[0] == "Estimated average treatment effect (95% confidence interval)"
        assert "1.23 (1.00, 1.50)" in text

    def test_nonfinite_json_is_null(self):
        assert json.loads(dumps({"x": float("nan"), "y": np.float64(2.5)})) == {"x": None,
                                                                                "y": 2.5}


class TestEstimateCommand:
    def test_binary_ctmle(self, binary_csv, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["estimate", str(binary_csv), "--estimator", "ctmle,tmle", "--out", str(out),
                     "--seed", "3"])
        assert code == EXIT_OK
        payload = json.loads((out / "estimate.json").read_text())
        assert payload["status"] == "ok" and payload["n"] == 200
        for r in payload["results"]:
            assert abs(r["eif_mean"]) <= 1e-8
            assert r["ci"][0] <= r["psi"] <= r["ci"][1]
            assert r["seed"] == 3
        assert "CTMLE" in capsys.readouterr().out
        assert (out / "estimate.txt").read_text().startswith("Estimated average treatment")

    def test_json_round_trip(self, binary_csv, tmp_path):
        out = tmp_path / "out"
        main(["estimate", str(binary_csv), "--out", str(out)])
        text = (out / "estimate.json").read_text()
        assert dumps(json.loads(text)) + "\n" == text

    def test_deterministic(self, binary_csv, tmp_path):
        for d in ("a", "b"):
            main(["estimate", str(binary_csv), "--estimator", "cv-ctmle", "--out",
                  str(tmp_path / d)])
        assert ((tmp_path / "a" / "estimate.json").read_bytes()
                == (tmp_path / "b" / "estimate.json").read_bytes())

    def test_tsm(self, binary_csv, tmp_path):
        out = tmp_path / "out"
        assert main(["estimate", str(binary_csv), "--estimand", "tsm", "--arm", "0",
                     "--out", str(out)]) == EXIT_OK
        assert json.loads((out / "estimate.json").read_text())["results"][0]["target"] == "tsm"

    def test_multiarm(self, three_arm_csv, tmp_path):
        out = tmp_path / "out"
        code = main(["estimate", str(three_arm_csv), "--estimator", "ctmle", "--multiarm",
                     "--out", str(out)])
        assert code == EXIT_OK
        entry = json.loads((out / "estimate.json").read_text())["results"][0]
        psi = [e["psi"] for e in entry["estimates"]]
        assert len(psi) == 3
        oracle = wald_test_equal_means(psi, np.array(entry["covariance"]))
        assert entry["wald"]["statistic"] == pytest.approx(oracle.statistic, rel=1e-12)
        assert entry["wald"]["p_value"] == pytest.approx(oracle.p_value, rel=1e-12)
        assert "p-value" in (out / "estimate.txt").read_text()

    def test_non_binary_without_multiarm(self, three_arm_csv, tmp_path, capsys):
        assert main(["estimate", str(three_arm_csv), "--out", str(tmp_path)]) == EXIT_USAGE
        assert "--multiarm" in capsys.readouterr().err

    def test_bad_column(self, binary_csv, tmp_path, capsys):
        code = main(["estimate", str(binary_csv), "--treatment", "Trt", "--out", str(tmp_path)])
        assert code == EXIT_USAGE
        assert "'Trt'" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["estimate", str(tmp_path / "nope.csv")]) == EXIT_USAGE

    def test_bad_flag(self, capsys):
        assert main(["estimate"]) == EXIT_USAGE

    def test_estimation_failure(self, tmp_path, capsys):
        # one treated unit: the folds cannot all contain a treated training row
        rows = [[i, int(i == 0), 0.1 * i] for i in range(10)]
        path = write_csv(tmp_path / "one.csv", ["X", "A", "Y"], rows)
        code = main(["estimate", str(path), "--estimator", "cv-ctmle", "--estimand", "tsm",
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_FAILURE
        payload = json.loads((tmp_path / "out" / "estimate.json").read_text())
        assert payload["status"] == "error"


class TestSimulateCommand:
    ARGS = ["simulate", "--dgp", "sim1", "--gamma", "0", "--n", "60", "--reps", "4",
            "--seed", "1", "--variance", "none"]

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert main(self.ARGS + ["--out", str(tmp_path / d)]) == EXIT_OK
        for name in ("simulation.json", "simulation.csv", "kde_ctmle.csv", "simulation.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_sim2_truth(self, tmp_path):
        code = main(["simulate", "--dgp", "sim2", "--n", "60", "--reps", "2", "--estimator",
                     "tmle", "--variance", "none", "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert json.loads((tmp_path / "simulation.json").read_text())["truth"] == 0.0

    def test_single_rep_rejected(self, tmp_path, capsys):
        assert main(["simulate", "--dgp", "sim1", "--reps", "1", "--out", str(tmp_path)]) == 2
        assert "reps" in capsys.readouterr().err

    def test_unknown_dgp(self, tmp_path):
        assert main(["simulate", "--dgp", "sim9", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_unknown_estimator(self, tmp_path):
        assert main(["simulate", "--dgp", "sim1", "--estimator", "aipw",
                     "--out", str(tmp_path)]) == EXIT_USAGE

    def test_summary_printed(self, tmp_path, capsys):
        main(self.ARGS + ["--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert "rel. efficiency" in out and "oracle cov." in out
