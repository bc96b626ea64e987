import logging

import numpy as np
import pandas as pd
import pytest

from pseudoglmm.errors import ValidationError
from pseudoglmm.simharness import (
    COEF_NAMES,
    CORRECT_MODEL,
    SETTINGS,
    TERMS,
    FitRecord,
    ReplicateBundle,
    SimSetting,
    aggregate_report,
    candidate_models,
    coverage_band,
    get_setting,
    run_replicate,
    run_study,
    simulate_dataset,
)


class TestSettings:
    def test_three_named_settings(self):
        assert {(s.m, s.n) for s in SETTINGS.values()} == {(30, 100), (50, 60), (100, 30)}
        s = SETTINGS["m30n100"]
        assert s.beta == (2.29, -0.30, 0.09, -0.96, -0.81, -0.81, -0.79) and s.sigma_u == 0.48

    def test_validation(self):
        with pytest.raises(ValidationError):
            get_setting("m7n7")
        with pytest.raises(ValidationError):
            SimSetting("bad", 1, 10)
        with pytest.raises(ValidationError):
            SimSetting("bad", 5, 10, k_list=(5,))


class TestSimulate:
    def test_shape_and_groups(self):
        data = simulate_dataset(SETTINGS["m30n100"], 0)
        assert len(data) == 3000
        assert data["group"].nunique() == 30
        assert list(data.columns[:9]) == ["y", "x1", "x2", "x3[2]", "x3[3]", "x3[4]", "x3[5]", "x4", "x5"]
        np.testing.assert_array_equal(data["y"], np.round(data["y"]))
        dummies = data[["x3[2]", "x3[3]", "x3[4]", "x3[5]"]].to_numpy()
        assert dummies.sum(axis=1).max() <= 1

    def test_deterministic(self):
        a = simulate_dataset(SETTINGS["m50n60"], 3)
        b = simulate_dataset(SETTINGS["m50n60"], 3)
        pd.testing.assert_frame_equal(a, b)
        assert not a.equals(simulate_dataset(SETTINGS["m50n60"], 4))

    def test_zero_random_effect(self):
        def between(sigma_u):
            data = simulate_dataset(get_setting("m30n100", sigma_u=sigma_u), 1)
            return np.log(data.groupby("group")["y"].mean()).var()

        assert between(0.0) < 0.05 < between(0.48)

    def test_degenerate_groups_redrawn(self, caplog):
        with caplog.at_level(logging.INFO, logger="pseudoglmm.simharness"):
            data = simulate_dataset(SETTINGS["m100n30"], 0)
        assert "redrawing" in caplog.text
        for _, block in data.groupby("group"):
            assert np.all(block.drop(columns="group").std() > 0)


class TestModels:
    def test_thirty_one_candidates(self):
        models = candidate_models()
        assert len(models) == 31 and len(set(models)) == 31
        assert CORRECT_MODEL in models
        assert TERMS["x3"] == ["x3[2]", "x3[3]", "x3[4]", "x3[5]"]


def _bundle(rep, beta, lo, hi, selected=CORRECT_MODEL):
    rec = FitRecord(np.asarray(beta, float), np.zeros(7), np.asarray(lo, float), np.asarray(hi, float),
                    0.48, selected, np.ones(3))
    return ReplicateBundle(rep, "t", actual=rec, selected_full_aic=selected, pseudo={4: rec},
                           residuals={4: np.zeros(2)})


class TestReport:
    def test_exact_estimates(self):
        s = get_setting("m30n100", k_list=(4,), reps=3)
        truth = np.array(s.beta)
        bundles = [_bundle(r, truth, truth - 0.1, truth + 0.1) for r in range(3)]
        rep = aggregate_report(bundles, s)
        bias = rep.bias[rep.bias.coefficient.isin(COEF_NAMES)]
        np.testing.assert_array_equal(bias.mean_rel_bias, 0.0)
        assert (rep.coverage.coverage == 1.0).all()
        assert (rep.coverage.n_reps == 3).all()
        row = rep.selection.set_index("source").loc["ps4"]
        assert row.pct_correct == 100.0 and row.pct_same_as_actual == 100.0

    def test_coverage_counts_misses(self):
        s = get_setting("m30n100", k_list=(4,), reps=4)
        truth = np.array(s.beta)
        bundles = [_bundle(r, truth, truth + 0.1 * (r == 0), truth + 0.2) for r in range(4)]
        cov = aggregate_report(bundles, s).coverage_of(4)
        assert cov["x1"] == 0.75

    def test_failures_excluded(self):
        s = get_setting("m30n100", k_list=(4,), reps=2)
        truth = np.array(s.beta)
        ok = _bundle(0, truth, truth - 1, truth + 1)
        broken = ReplicateBundle(1, "t", errors={"actual": "boom"})
        rep = aggregate_report([ok, broken], s)
        assert (rep.coverage.n_reps == 1).all()
        assert (rep.bias.n_failed == 1).all()

    def test_band(self):
        lo, hi = coverage_band(50)
        # exact oracle: P(X<=43)=0.0118 < 0.025 <= P(X<=44)=0.0378 for X~Bin(50, 0.95)
        assert lo == pytest.approx(0.88) and hi == 1.0


class TestGaussianHook:
    def test_pseudo_fits_match_and_report_is_deterministic(self, tmp_path):
        setting = get_setting("m30n100", m=6, n=60, response="gaussian", k_list=(2,), reps=2, seed=9)
        first = run_study(setting)
        for b in first:
            assert not b.errors
            np.testing.assert_allclose(b.pseudo[2].beta, b.actual.beta, atol=1e-4)
            assert b.selected_full_aic is None
        aggregate_report(first, setting).write(tmp_path / "a")
        aggregate_report(run_study(setting), setting).write(tmp_path / "b")
        for name in ("bias", "coverage", "selection", "predictions"):
            assert (tmp_path / "a" / f"{name}.csv").read_bytes() == (tmp_path / "b" / f"{name}.csv").read_bytes()
        header = (tmp_path / "a" / "coverage.csv").read_text().splitlines()[0]
        assert header == "setting,source,coefficient,n_reps,coverage,mean_ci_lower,mean_ci_upper"


class TestPoissonReplicate:
    def test_fidelity_improves_with_order(self):
        setting = get_setting("m30n100", m=8, n=100, seed=2)
        b = run_replicate(setting, 0)
        assert not b.errors
        gaps = [np.abs(b.pseudo[k].beta - b.actual.beta).mean() for k in (2, 3, 4)]
        assert gaps[0] >= gaps[1] >= gaps[2]
        # truncated and full AIC pick the same model on integer responses
        assert b.selected_full_aic == b.actual.selected
