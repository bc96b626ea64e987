import json
import logging

import numpy as np
import pandas as pd
import pytest

from pseudoglmm.cli import main
from pseudoglmm.errors import ValidationError
from pseudoglmm.federation import (
    PipelineConfig,
    export_by_group,
    export_summary,
    fit_frame,
    load_summaries,
    standardize_columns,
    validate_summary,
)
from pseudoglmm.moments import ProviderSummary, summarize_provider

VARS = ["los", "charges", "gender", "covid", "emergency"]


def _hospital_csv(path, n=1520, seed=0, missing_row=None):
    rng = np.random.default_rng(seed)
    df = pd.DataFrame({
        "los": rng.poisson(4, n) + 1,
        "charges": np.round(rng.lognormal(9.6, 0.7, n), 2),
        "gender": rng.choice(["F", "M"], n),
        "covid": rng.binomial(1, 0.12, n),
        "emergency": rng.binomial(1, 0.67, n),
    })
    if missing_row is not None:
        df.loc[missing_row, "charges"] = np.nan
    df.to_csv(path, index=False)
    return df


def _corpus(path, seed=3):
    rng = np.random.default_rng(seed)
    parts = []
    for h, n in (("A", 140), ("B", 90), ("C", 70)):
        u = rng.normal(0, 0.5)
        x = rng.normal(0, 1, n)
        z = rng.gamma(2.0, 1.5, n)
        g = rng.choice(["F", "M"], n)
        y = 1 + 0.5 * x - 0.2 * z + 0.3 * (g == "M") + u + rng.normal(0, 1, n)
        parts.append(pd.DataFrame({"hospital": h, "y": y, "x": x, "z": z, "gender": g}))
    df = pd.concat(parts, ignore_index=True)
    df.to_csv(path, index=False)
    return df


class TestExport:
    def test_partition_and_moment_count(self, tmp_path):
        _hospital_csv(tmp_path / "h.csv")
        s = export_summary(tmp_path / "h.csv", VARS, provider_id="H1", out=tmp_path / "h.json")
        assert [sg.n for sg in s.subgroups] == [250] * 5 + [270]
        assert all(len(sg.std_moments) == 125 for sg in s.subgroups)
        assert s.variable_names == ["los", "charges", "gender[M]", "covid", "emergency"]
        assert s.variable_kinds == ["numeric", "numeric", "binary-dummy", "binary-dummy", "binary-dummy"]

    def test_incomplete_row_dropped_and_logged(self, tmp_path, caplog):
        _hospital_csv(tmp_path / "h.csv", n=300, missing_row=7)
        with caplog.at_level(logging.INFO, logger="pseudoglmm.federation"):
            s = export_summary(tmp_path / "h.csv", VARS)
        assert s.n_total == 299
        assert "dropped 1 incomplete rows" in caplog.text

    def test_single_level_categorical(self, tmp_path):
        df = _hospital_csv(tmp_path / "h.csv", n=50)
        df["gender"] = "F"
        df.to_csv(tmp_path / "h.csv", index=False)
        with pytest.raises(ValidationError, match="zero-variance dummy"):
            export_summary(tmp_path / "h.csv", VARS)

    def test_constant_numeric_column(self, tmp_path):
        df = _hospital_csv(tmp_path / "h.csv", n=50)
        df["covid"] = 0
        with pytest.raises(ValidationError, match="covid"):
            export_summary(df, VARS)

    def test_missing_column(self, tmp_path):
        _hospital_csv(tmp_path / "h.csv", n=20)
        with pytest.raises(ValidationError, match="missing columns"):
            export_summary(tmp_path / "h.csv", VARS + ["age"])

    def test_empty_after_filtering(self):
        df = pd.DataFrame({"a": [1.0, np.nan], "b": [np.nan, 2.0]})
        with pytest.raises(ValidationError, match="no complete rows"):
            export_summary(df, ["a", "b"])

    def test_round_trip_bit_identical(self, tmp_path):
        _hospital_csv(tmp_path / "h.csv", n=600, seed=4)
        export_summary(tmp_path / "h.csv", VARS, provider_id="H1", out=tmp_path / "a.json")
        # recompute from the source table independently of the export path
        raw = pd.read_csv(tmp_path / "h.csv", float_precision="round_trip")
        raw["gender[M]"] = (raw["gender"] == "M").astype(float)
        cols = ["los", "charges", "gender[M]", "covid", "emergency"]
        again = summarize_provider(raw[cols].to_numpy(dtype=float), "H1", cols,
                                   ["numeric", "numeric", "binary-dummy", "binary-dummy", "binary-dummy"])
        assert (tmp_path / "a.json").read_text() == again.dumps()
        assert ProviderSummary.load(tmp_path / "a.json").dumps() == again.dumps()

    def test_by_group_shares_schema(self, tmp_path):
        df = _corpus(tmp_path / "c.csv")
        df.loc[df.hospital == "C", "gender"] = "F"  # one level locally, two globally
        df.loc[df.index[-1], "gender"] = "M"
        out = export_by_group(df, ["y", "x", "gender"], "hospital", out_dir=tmp_path)
        assert sorted(out) == ["A", "B", "C"]
        assert all(s.variable_names == ["y", "x", "gender[M]"] for s in out.values())
        assert sorted(p.name for p in tmp_path.glob("*.json")) == ["A.json", "B.json", "C.json"]

    def test_config_invariants(self):
        with pytest.raises(ValidationError):
            PipelineConfig(k_max=5)
        with pytest.raises(ValidationError):
            PipelineConfig(subgroup_base=250, subgroup_cap=600)
        with pytest.raises(ValidationError):
            PipelineConfig(subgroup_base=250, subgroup_cap=200)


class TestValidate:
    def _doc(self, tmp_path):
        _hospital_csv(tmp_path / "h.csv", n=250)
        return export_summary(tmp_path / "h.csv", VARS).to_dict()

    def test_fresh_summary_ok(self, tmp_path):
        assert validate_summary(self._doc(tmp_path)).ok

    def test_wrong_order2_identity(self, tmp_path):
        doc = self._doc(tmp_path)
        item = next(it for it in doc["subgroups"][0]["std_moments"] if it["r"] == [2, 0, 0, 0, 0])
        item["value"] = 0.5
        report = validate_summary(doc)
        assert not report.ok
        assert "(2, 0, 0, 0, 0)" in str(report)

    def test_non_psd_block(self, tmp_path):
        doc = self._doc(tmp_path)
        n = doc["subgroups"][0]["n"]
        c = (n - 1) / n
        # correlations 0.9, 0.9, -0.9 among the first three variables: eigenvalue -0.8 * c
        target = {(1, 1, 0, 0, 0): 0.9 * c, (1, 0, 1, 0, 0): 0.9 * c, (0, 1, 1, 0, 0): -0.9 * c}
        for it in doc["subgroups"][0]["std_moments"]:
            if tuple(it["r"]) in target:
                it["value"] = target[tuple(it["r"])]
        block = np.array([[1, 0.9, 0.9], [0.9, 1, -0.9], [0.9, -0.9, 1]]) * c
        assert np.linalg.eigvalsh(block).min() < -0.1
        report = validate_summary(doc)
        assert any("positive semidefinite" in v for v in report.violations)

    def test_structural_checks(self, tmp_path):
        doc = self._doc(tmp_path)
        bad = json.loads(json.dumps(doc))
        bad["format_version"] = 2
        assert "format_version" in str(validate_summary(bad))
        bad = json.loads(json.dumps(doc))
        bad["subgroups"][0]["std_moments"].pop()
        assert "expected 125" in str(validate_summary(bad))
        bad = json.loads(json.dumps(doc))
        bad["subgroups"][0]["n"] = 1
        assert not validate_summary(bad).ok
        bad = json.loads(json.dumps(doc))
        bad["subgroups"][0]["std_moments"][40]["value"] = float("nan")
        assert "non-finite" in str(validate_summary(bad))
        bad = json.loads(json.dumps(doc))
        bad["n_total"] = 7
        assert "n_total" in str(validate_summary(bad))

    def test_load_rejects_invalid_file(self, tmp_path):
        doc = self._doc(tmp_path)
        doc["subgroups"][0]["variances"][0] = -1.0
        (tmp_path / "x.json").write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="x.json"):
            load_summaries(tmp_path)


class TestFitFrame:
    def test_standardize_uses_frame_constants(self):
        df = pd.DataFrame({"a": [1.0, 2.0, 3.0, 6.0]})
        out, const = standardize_columns(df, ["a"])
        assert const["a"]["mean"] == 3.0
        assert out["a"].std(ddof=1) == pytest.approx(1.0)

    def test_glm_and_glmm_reports(self, tmp_path):
        df = _corpus(tmp_path / "c.csv")
        df["gender[M]"] = (df.gender == "M").astype(float)
        glm = fit_frame(df, "y ~ x + z", "gaussian", std=["z"])
        assert glm["model"] == "glm" and glm["standardized"]["z"]["sd"] > 0
        mixed = fit_frame(df, "y ~ x + z + gender[M]", "gaussian", random_intercept="hospital")
        assert mixed["model"] == "glmm" and mixed["m"] == 3
        with pytest.raises(ValidationError):
            fit_frame(df, "y ~ x", "gaussian", random_intercept="nope")


class TestCLI:
    def _pipeline(self, tmp_path, tag):
        out = tmp_path / tag
        assert main(["aggregate", "--input", str(tmp_path / "c.csv"), "--vars", "y,x,z,gender",
                     "--group-col", "hospital", "--out", str(out / "sums")]) == 0
        assert main(["validate", *map(str, sorted((out / "sums").glob("*.json")))]) == 0
        assert main(["generate", "--summaries", str(out / "sums"), "--seed", "7",
                     "--out", str(out / "pseudo.csv")]) == 0
        assert main(["fit", "--data", str(out / "pseudo.csv"), "--formula", "y ~ x + z + gender[M]",
                     "--family", "gaussian", "--random-intercept", "group_id", "--std", "z",
                     "--out", str(out / "fit.json")]) == 0
        return out

    def test_end_to_end_matches_actual_and_is_deterministic(self, tmp_path):
        df = _corpus(tmp_path / "c.csv")
        a = self._pipeline(tmp_path, "run1")
        b = self._pipeline(tmp_path, "run2")
        assert (a / "pseudo.csv").read_bytes() == (b / "pseudo.csv").read_bytes()
        assert (a / "fit.json").read_bytes() == (b / "fit.json").read_bytes()
        pseudo = json.loads((a / "fit.json").read_text())
        df["gender[M]"] = (df.gender == "M").astype(float)
        actual = fit_frame(df, "y ~ x + z + gender[M]", "gaussian", "hospital", std=["z"])
        for p, q in zip(pseudo["coefficients"], actual["coefficients"]):
            assert abs(p["estimate"] - q["estimate"]) <= 1e-4
        assert abs(pseudo["sigma_u"] - actual["sigma_u"]) <= 1e-4
        assert abs(pseudo["residual_sigma"] - actual["residual_sigma"]) <= 1e-4

    def test_pseudo_csv_layout(self, tmp_path):
        _corpus(tmp_path / "c.csv")
        out = self._pipeline(tmp_path, "run")
        header = (out / "pseudo.csv").read_text().splitlines()[0]
        assert header == "y,x,z,gender[M],group_id,subgroup"

    def test_per_provider_output(self, tmp_path):
        _corpus(tmp_path / "c.csv")
        main(["aggregate", "--input", str(tmp_path / "c.csv"), "--vars", "y", "x", "--group-col", "hospital",
              "--out", str(tmp_path / "sums")])
        assert main(["generate", "--summaries", str(tmp_path / "sums"), "--per-provider",
                     "--out", str(tmp_path / "ps")]) == 0
        assert sorted(p.name for p in (tmp_path / "ps").glob("*.csv")) == ["A.csv", "B.csv", "C.csv"]

    def test_single_provider_aggregate(self, tmp_path, capsys):
        _hospital_csv(tmp_path / "h.csv", n=1520)
        assert main(["aggregate", "--input", str(tmp_path / "h.csv"), "--vars", *VARS,
                     "--out", str(tmp_path / "h.json")]) == 0
        assert "moments per subgroup=125" in capsys.readouterr().out

    def test_exit_codes(self, tmp_path):
        _corpus(tmp_path / "c.csv")
        assert main(["aggregate", "--input", str(tmp_path / "c.csv"), "--vars", "y,nope",
                     "--out", str(tmp_path / "s.json")]) == 1
        assert main(["generate", "--summaries", str(tmp_path / "empty"), "--out", "x.csv"]) == 1
        with pytest.raises(SystemExit) as info:
            main(["fit", "--data", "x.csv"])
        assert info.value.code == 1
        main(["aggregate", "--input", str(tmp_path / "c.csv"), "--vars", "y,x,z", "--group-col", "hospital",
              "--out", str(tmp_path / "sums")])
        assert main(["generate", "--summaries", str(tmp_path / "sums"), "--max-iterations", "1",
                     "--restarts", "0", "--out", str(tmp_path / "p.csv")]) == 2
        bad = json.loads((tmp_path / "sums" / "A.json").read_text())
        bad["subgroups"][0]["std_moments"][3]["value"] = 0.5
        (tmp_path / "sums" / "A.json").write_text(json.dumps(bad))
        assert main(["validate", str(tmp_path / "sums" / "A.json")]) == 1
