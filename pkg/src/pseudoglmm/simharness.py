"""Monte Carlo study: actual-data vs pseudo-data fits of a Poisson mixed model.

Each replicate simulates grouped data from a known random-intercept model,
builds per-group moment summaries at several truncation orders K, turns
them into pseudo-data, and compares fits, Wald coverage, truncated-AIC
model selection over all 31 main-effect models, and predictions.
"""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import gammaln
from scipy.stats import binom

from .errors import NumericalError, ValidationError
from .families import GAUSSIAN, SOFT_POISSON
from .glmm import MixedModelSpec, fit_glmm, fit_lmm, predict
from .moments import summarize_subgroup
from .pseudogen import SolverOptions, generate_pseudo_data

log = logging.getLogger(__name__)

X1_MEAN = 3150.14
X1_VAR = 710797.5
X3_PROBS = (0.095, 0.127, 0.111, 0.387, 0.280)
TRUE_BETA = (2.29, -0.30, 0.09, -0.96, -0.81, -0.81, -0.79)
TRUE_SIGMA_U = 0.48

COEF_NAMES = ["(Intercept)", "x1", "x2", "x3[2]", "x3[3]", "x3[4]", "x3[5]"]
VARIABLES = ["y", "x1", "x2", "x3[2]", "x3[3]", "x3[4]", "x3[5]", "x4", "x5"]
# candidate terms for selection; the x3 dummies enter or leave together
TERMS = {
    "x1": ["x1"],
    "x2": ["x2"],
    "x3": ["x3[2]", "x3[3]", "x3[4]", "x3[5]"],
    "x4": ["x4"],
    "x5": ["x5"],
}
CORRECT_MODEL = ("x1", "x2", "x3")
MAX_GROUP_RETRIES = 3

# a cheap budget: fits barely move once the low-order moments are matched
HARNESS_SOLVER = SolverOptions(max_iterations=60, max_restarts=0)


@dataclass(frozen=True)
class SimSetting:
    name: str
    m: int
    n: int
    beta: tuple[float, ...] = TRUE_BETA
    sigma_u: float = TRUE_SIGMA_U
    k_list: tuple[int, ...] = (2, 3, 4)
    reps: int = 50
    seed: int = 0
    response: str = "poisson"  # or "gaussian" (test hook)
    residual_sd: float = 1.0  # gaussian response only
    solver: SolverOptions = HARNESS_SOLVER

    def __post_init__(self) -> None:
        if self.m < 2 or self.n < 2:
            raise ValidationError("need m >= 2 groups of n >= 2 rows")
        if len(self.beta) != len(COEF_NAMES):
            raise ValidationError(f"beta needs {len(COEF_NAMES)} entries")
        if any(k not in (2, 3, 4) for k in self.k_list):
            raise ValidationError(f"K must be in (2, 3, 4), got {self.k_list}")
        if self.response not in ("poisson", "gaussian"):
            raise ValidationError(f"unknown response {self.response!r}")


SETTINGS = {
    "m30n100": SimSetting("m30n100", 30, 100),
    "m50n60": SimSetting("m50n60", 50, 60),
    "m100n30": SimSetting("m100n30", 100, 30),
}


def get_setting(name: str, **overrides) -> SimSetting:
    try:
        base = SETTINGS[name]
    except KeyError:
        raise ValidationError(f"unknown setting {name!r}; choose from {sorted(SETTINGS)}") from None
    return replace(base, **overrides)


# ------------------------------------------------------------------ data


def _draw_group(rng: np.random.Generator, setting: SimSetting, u: float) -> np.ndarray:
    n = setting.n
    x1 = (rng.normal(X1_MEAN, np.sqrt(X1_VAR), n) - X1_MEAN) / np.sqrt(X1_VAR)
    x2 = rng.binomial(1, 0.56, n).astype(float)
    cat = rng.choice(len(X3_PROBS), size=n, p=X3_PROBS)
    dummies = np.stack([(cat == k).astype(float) for k in range(1, len(X3_PROBS))], axis=1)
    x4 = rng.standard_normal(n)
    x5 = rng.binomial(1, 0.5, n).astype(float)
    X = np.column_stack([np.ones(n), x1, x2, dummies])
    eta = X @ np.asarray(setting.beta) + u
    if setting.response == "poisson":
        y = rng.poisson(np.exp(eta)).astype(float)
    else:
        y = eta + rng.normal(0.0, setting.residual_sd, n)
    return np.column_stack([y, x1, x2, dummies, x4, x5])


def _degenerate(block: np.ndarray) -> bool:
    return bool(np.any(block.std(axis=0) == 0))


def simulate_dataset(setting: SimSetting, replicate_seed: int) -> pd.DataFrame:
    """One dataset with columns ``VARIABLES`` plus ``group``.

    ``x1`` is already standardized with its population mean and variance.
    A group whose draw has a constant column is redrawn from the next
    sub-seed, at most ``MAX_GROUP_RETRIES`` times.
    """
    blocks = []
    for g in range(setting.m):
        for attempt in range(MAX_GROUP_RETRIES + 1):
            rng = np.random.default_rng([setting.seed, replicate_seed, g, attempt])
            u = rng.normal(0.0, setting.sigma_u) if setting.sigma_u > 0 else 0.0
            block = _draw_group(rng, setting, u)
            if not _degenerate(block):
                break
            log.info("replicate %d group %d: constant column, redrawing (attempt %d)", replicate_seed, g, attempt + 1)
        else:
            raise ValidationError(f"replicate {replicate_seed} group {g}: still degenerate after retries")
        blocks.append(block)
    frame = pd.DataFrame(np.vstack(blocks), columns=VARIABLES)
    frame["group"] = np.repeat(np.arange(setting.m), setting.n)
    return frame


# ------------------------------------------------------------- replicate


def candidate_models() -> list[tuple[str, ...]]:
    """All 31 non-empty subsets of the candidate terms."""
    names = list(TERMS)
    return [c for k in range(1, len(names) + 1) for c in itertools.combinations(names, k)]


def _design(frame: pd.DataFrame, terms: Sequence[str]) -> np.ndarray:
    cols = [c for t in terms for c in TERMS[t]]
    return np.column_stack([np.ones(len(frame)), frame[cols].to_numpy()])


def _fit(frame: pd.DataFrame, terms: Sequence[str], response: str, compute_se: bool = True):
    family = SOFT_POISSON if response == "poisson" else GAUSSIAN
    spec = MixedModelSpec(frame["y"].to_numpy(), _design(frame, terms), frame["group"].to_numpy(), family)
    if response == "gaussian":
        return fit_lmm(spec)
    return fit_glmm(spec, compute_se=compute_se)


def select_model(frame: pd.DataFrame, response: str = "poisson") -> tuple[tuple[str, ...], dict]:
    """Minimum-AIC model among ``candidate_models()`` and the AIC of each."""
    aics = {}
    for terms in candidate_models():
        fit = _fit(frame, terms, response, compute_se=False)
        aics[terms] = fit.aic
    best = min(aics, key=aics.get)
    return best, aics


def pseudo_dataset(frame: pd.DataFrame, k_max: int, opts: SolverOptions) -> tuple[pd.DataFrame, np.ndarray]:
    """Per-group summaries at order ``k_max`` turned into pseudo-data."""
    parts, residuals = [], []
    for g, block in frame.groupby("group", sort=True):
        summary = summarize_subgroup(block[VARIABLES].to_numpy(), k_max, VARIABLES)
        ps = generate_pseudo_data(summary, opts, variable_names=VARIABLES, group_id=str(g), strict=False)
        part = pd.DataFrame(ps.values, columns=VARIABLES)
        part["group"] = g
        parts.append(part)
        residuals.append(ps.achieved_max_residual)
    return pd.concat(parts, ignore_index=True), np.array(residuals)


@dataclass
class FitRecord:
    beta: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sigma_u: float
    selected: tuple[str, ...]
    predictions: np.ndarray


@dataclass
class ReplicateBundle:
    replicate: int
    setting: str
    actual: FitRecord | None = None
    selected_full_aic: tuple[str, ...] | None = None
    pseudo: dict[int, FitRecord] = field(default_factory=dict)
    residuals: dict[int, np.ndarray] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0


def _record(frame: pd.DataFrame, actual: pd.DataFrame, response: str) -> FitRecord:
    fit = _fit(frame, CORRECT_MODEL, response)
    lo, hi = fit.conf_int()
    selected, _ = select_model(frame, response)
    preds = predict(fit, _design(actual, CORRECT_MODEL), actual["group"].to_numpy())
    return FitRecord(fit.beta, fit.standard_errors, lo, hi, fit.sigma_u, selected, preds)


def run_replicate(setting: SimSetting, replicate: int, k_list: Sequence[int] | None = None) -> ReplicateBundle:
    """Simulate one dataset and fit it as actual data and as pseudo-data at each K."""
    start = time.perf_counter()
    bundle = ReplicateBundle(replicate, setting.name)
    k_list = setting.k_list if k_list is None else k_list
    try:
        data = simulate_dataset(setting, replicate)
        bundle.actual = _record(data, data, setting.response)
        if setting.response == "poisson":
            # the full AIC adds 2 * sum(log y!) to every model alike
            const = 2.0 * float(np.sum(gammaln(data["y"].to_numpy() + 1.0)))
            _, aics = select_model(data, setting.response)
            bundle.selected_full_aic = min(aics, key=lambda t: aics[t] + const)
    except (NumericalError, ValidationError, np.linalg.LinAlgError) as exc:
        bundle.errors["actual"] = str(exc)
        return bundle
    for k in k_list:
        try:
            pseudo, res = pseudo_dataset(data, k, setting.solver)
            bundle.residuals[k] = res
            bundle.pseudo[k] = _record(pseudo, data, setting.response)
        except (NumericalError, ValidationError, np.linalg.LinAlgError) as exc:
            bundle.errors[f"K{k}"] = str(exc)
            log.warning("replicate %d K=%d failed: %s", replicate, k, exc)
    bundle.seconds = time.perf_counter() - start
    return bundle


def _run_one(args: tuple[SimSetting, int, tuple[int, ...]]) -> ReplicateBundle:
    setting, rep, k_list = args
    return run_replicate(setting, rep, k_list)


def run_study(setting: SimSetting, workers: int = 1, k_list: Sequence[int] | None = None) -> list[ReplicateBundle]:
    """All ``setting.reps`` replicates, ordered by replicate index."""
    k_list = tuple(setting.k_list if k_list is None else k_list)
    jobs = [(setting, r, k_list) for r in range(setting.reps)]
    if workers <= 1:
        out = []
        for job in jobs:
            out.append(_run_one(job))
            log.info("replicate %d done in %.1fs", job[1], out[-1].seconds)
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


# ---------------------------------------------------------------- report


@dataclass
class SimulationReport:
    bias: pd.DataFrame
    coverage: pd.DataFrame
    selection: pd.DataFrame
    predictions: pd.DataFrame

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("bias", "coverage", "selection", "predictions"):
            getattr(self, name).to_csv(out / f"{name}.csv", index=False, lineterminator="\n")

    def coverage_of(self, k: int | str) -> pd.Series:
        rows = self.coverage[self.coverage["source"] == _source(k)]
        return rows.set_index("coefficient")["coverage"]


def _source(k: int | str) -> str:
    return "actual" if k == "actual" else f"ps{k}"


def coverage_band(reps: int, nominal: float = 0.95, level: float = 0.95) -> tuple[float, float]:
    """Central binomial band of empirical coverage when the true rate is ``nominal``."""
    alpha = 1.0 - level
    lo = binom.ppf(alpha / 2, reps, nominal) / reps
    hi = binom.isf(alpha / 2, reps, nominal) / reps
    return float(lo), float(min(hi, 1.0))


def aggregate_report(bundles: Sequence[ReplicateBundle], setting: SimSetting) -> SimulationReport:
    truth = np.asarray(setting.beta)
    ok = [b for b in bundles if b.actual is not None]
    sources: list[tuple[str, list[FitRecord]]] = [("actual", [b.actual for b in ok])]
    for k in setting.k_list:
        sources.append((_source(k), [b.pseudo[k] for b in ok if k in b.pseudo]))
    failed = {src: len(bundles) - len(recs) for src, recs in sources}

    bias_rows, cov_rows = [], []
    for src, recs in sources:
        if not recs:
            log.warning("no successful replicates for %s", src)
            bias_rows.append({"setting": setting.name, "source": src, "coefficient": "", "n_reps": 0,
                              "n_failed": failed[src]})
            continue
        B = np.array([r.beta for r in recs])
        rel = (B - truth) / np.abs(truth)
        lo = np.array([r.lower for r in recs])
        hi = np.array([r.upper for r in recs])
        hit = (lo <= truth) & (truth <= hi)
        for j, name in enumerate(COEF_NAMES):
            q = np.quantile(rel[:, j], [0.25, 0.5, 0.75])
            bias_rows.append({
                "setting": setting.name, "source": src, "coefficient": name, "n_reps": len(recs),
                "n_failed": failed[src], "truth": truth[j], "mean_estimate": B[:, j].mean(),
                "mean_rel_bias": rel[:, j].mean(), "q25_rel_bias": q[0], "median_rel_bias": q[1],
                "q75_rel_bias": q[2], "sd_rel_bias": rel[:, j].std(ddof=1) if len(recs) > 1 else np.nan,
            })
            cov_rows.append({
                "setting": setting.name, "source": src, "coefficient": name, "n_reps": len(recs),
                "coverage": hit[:, j].mean(), "mean_ci_lower": lo[:, j].mean(), "mean_ci_upper": hi[:, j].mean(),
            })
        su = np.array([r.sigma_u for r in recs])
        rel_su = (su - setting.sigma_u) / setting.sigma_u if setting.sigma_u > 0 else su
        q = np.quantile(rel_su, [0.25, 0.5, 0.75])
        bias_rows.append({
            "setting": setting.name, "source": src, "coefficient": "sigma_u", "n_reps": len(recs),
            "n_failed": failed[src], "truth": setting.sigma_u, "mean_estimate": su.mean(),
            "mean_rel_bias": rel_su.mean(), "q25_rel_bias": q[0], "median_rel_bias": q[1],
            "q75_rel_bias": q[2], "sd_rel_bias": rel_su.std(ddof=1) if len(recs) > 1 else np.nan,
        })

    sel_rows, pred_rows = [], []
    if ok and ok[0].selected_full_aic is not None:
        sel_rows.append({
            "setting": setting.name, "source": "actual", "n_reps": len(ok),
            "pct_correct": 100.0 * np.mean([b.actual.selected == CORRECT_MODEL for b in ok]),
            "pct_same_as_actual": 100.0,
            "pct_full_aic_agrees": 100.0 * np.mean([b.actual.selected == b.selected_full_aic for b in ok]),
        })
    for k in setting.k_list:
        pairs = [(b.actual, b.pseudo[k]) for b in ok if k in b.pseudo]
        if not pairs:
            continue
        sel_rows.append({
            "setting": setting.name, "source": _source(k), "n_reps": len(pairs),
            "pct_correct": 100.0 * np.mean([p.selected == CORRECT_MODEL for _, p in pairs]),
            "pct_same_as_actual": 100.0 * np.mean([p.selected == a.selected for a, p in pairs]),
            "pct_full_aic_agrees": np.nan,
        })
        rel_pred = np.concatenate([np.abs(p.predictions - a.predictions) / np.abs(a.predictions) for a, p in pairs])
        pred_rows.append({
            "setting": setting.name, "source": _source(k), "n_reps": len(pairs),
            "mean_abs_rel_pred_diff": rel_pred.mean(), "max_abs_rel_pred_diff": rel_pred.max(),
            "mean_abs_coef_diff": np.mean([np.abs(p.beta - a.beta).mean() for a, p in pairs]),
            "mean_abs_sigma_u_diff": np.mean([abs(p.sigma_u - a.sigma_u) for a, p in pairs]),
            "median_max_moment_residual": float(np.median([b.residuals[k].max() for b in ok if k in b.residuals])),
        })
    return SimulationReport(
        bias=pd.DataFrame(bias_rows),
        coverage=pd.DataFrame(cov_rows),
        selection=pd.DataFrame(sel_rows),
        predictions=pd.DataFrame(pred_rows),
    )
