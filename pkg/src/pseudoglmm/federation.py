"""One-round exchange: provider export, analyst-side validation, pooling and fitting.

Providers run :func:`export_summary` on their own table and ship the JSON
file once. The analyst validates the files, synthesizes pseudo-data from
them and fits models on the pooled pseudo-data. Nothing downstream of
export touches provider rows.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ValidationError
from .families import get_family
from .formula import Formula, dummy_name
from .glm import fit_glm
from .glmm import MixedModelSpec, fit_glmm, fit_lmm
from .moments import (
    FORMAT_VERSION,
    ProviderSummary,
    count_multi_indices,
    enumerate_multi_indices,
    summarize_provider,
)
from .pseudogen import SolverOptions, generate_provider, pseudo_frame

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    k_max: int = 4
    subgroup_base: int = 250
    subgroup_cap: int = 500
    solver: SolverOptions = field(default_factory=SolverOptions)
    formula: str | None = None
    family: str = "gaussian"
    nagq: int = 1
    seed: int = 0
    shuffle_seed: int | None = None

    def __post_init__(self) -> None:
        if self.k_max not in (2, 3, 4):
            raise ValidationError(f"k_max must be 2, 3 or 4, got {self.k_max}")
        if not self.subgroup_base <= self.subgroup_cap <= 2 * self.subgroup_base:
            raise ValidationError("need subgroup_base <= subgroup_cap <= 2 * subgroup_base")


# ------------------------------------------------------------- provider side


def _read_table(source: str | Path | pd.DataFrame) -> pd.DataFrame:
    if isinstance(source, pd.DataFrame):
        return source.copy()
    return pd.read_csv(source, float_precision="round_trip")


def dummy_encode(
    frame: pd.DataFrame,
    variables: Sequence[str],
    categorical: Iterable[str] = (),
    levels: Mapping[str, Sequence] | None = None,
) -> tuple[pd.DataFrame, list[str]]:
    """Reference-code categorical columns; the first sorted level is the reference.

    Returns the numeric frame and the kind of every output column.
    """
    categorical = set(categorical)
    levels = dict(levels or {})
    cols: dict[str, pd.Series] = {}
    kinds: list[str] = []
    for var in variables:
        s = frame[var]
        if var in categorical or not pd.api.types.is_numeric_dtype(s):
            lv = sorted(pd.unique(s)) if var not in levels else list(levels[var])
            if len(lv) < 2:
                raise ValidationError(f"zero-variance dummy: categorical {var!r} has a single level {lv}")
            for level in lv[1:]:
                cols[dummy_name(var, level)] = (s == level).astype(float)
                kinds.append("binary-dummy")
        else:
            cols[var] = s.astype(float)
            vals = np.unique(s.to_numpy())
            kinds.append("binary-dummy" if set(vals.tolist()) <= {0, 1} else "numeric")
    return pd.DataFrame(cols, index=frame.index), kinds


def export_summary(
    source: str | Path | pd.DataFrame,
    variables: Sequence[str],
    config: PipelineConfig | None = None,
    provider_id: str = "provider",
    categorical: Iterable[str] = (),
    levels: Mapping[str, Sequence] | None = None,
    out: str | Path | None = None,
) -> ProviderSummary:
    """Summarize one provider's table (complete cases only) and optionally write it."""
    config = config or PipelineConfig()
    frame = _read_table(source)
    missing = [v for v in variables if v not in frame.columns]
    if missing:
        raise ValidationError(f"missing columns: {missing}")
    frame = frame[list(variables)]
    complete = frame.dropna()
    dropped = len(frame) - len(complete)
    if dropped:
        log.info("provider %s: dropped %d incomplete rows", provider_id, dropped)
    if complete.empty:
        raise ValidationError(f"provider {provider_id}: no complete rows")
    encoded, kinds = dummy_encode(complete, variables, categorical, levels)
    summary = summarize_provider(
        encoded.to_numpy(dtype=float),
        provider_id=provider_id,
        variable_names=list(encoded.columns),
        variable_kinds=kinds,
        k_max=config.k_max,
        base=config.subgroup_base,
        cap=config.subgroup_cap,
        shuffle_seed=config.shuffle_seed,
    )
    if out is not None:
        summary.save(out)
    return summary


def export_by_group(
    source: str | Path | pd.DataFrame,
    variables: Sequence[str],
    group_col: str,
    config: PipelineConfig | None = None,
    categorical: Iterable[str] = (),
    out_dir: str | Path | None = None,
) -> dict[str, ProviderSummary]:
    """One summary per value of ``group_col``, as when one custodian holds every provider's rows.

    Categorical levels are fixed over the whole table so all providers share a schema.
    """
    frame = _read_table(source)
    if group_col not in frame.columns:
        raise ValidationError(f"missing group column {group_col!r}")
    categorical = list(categorical)
    levels = {
        v: sorted(pd.unique(frame[v].dropna()))
        for v in variables
        if v in frame.columns and (v in categorical or not pd.api.types.is_numeric_dtype(frame[v]))
    }
    out: dict[str, ProviderSummary] = {}
    for gid, part in frame.groupby(group_col, sort=True):
        pid = str(gid)
        path = Path(out_dir) / f"{pid}.json" if out_dir is not None else None
        out[pid] = export_summary(part, variables, config, pid, categorical, levels, path)
    return out


# -------------------------------------------------------------- analyst side


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        return "ok" if self.ok else "\n".join(self.violations)


def validate_summary(source: str | Path | dict | ProviderSummary, tol: float = 1e-10) -> ValidationReport:
    """Structural and moment-identity checks on a provider summary file."""
    report = ValidationReport()
    bad = report.violations.append
    if isinstance(source, ProviderSummary):
        doc = source.to_dict()
    elif isinstance(source, dict):
        doc = source
    else:
        doc = json.loads(Path(source).read_text(encoding="utf-8"))

    if doc.get("format_version") != FORMAT_VERSION:
        bad(f"format_version is {doc.get('format_version')!r}, expected {FORMAT_VERSION}")
        return report
    try:
        p = len(doc["variables"])
        k_max = int(doc["k_max"])
        subgroups = doc["subgroups"]
    except (KeyError, TypeError) as exc:
        bad(f"missing top-level field: {exc}")
        return report
    if p < 1 or k_max < 1:
        bad(f"need at least one variable and k_max >= 1 (p={p}, k_max={k_max})")
        return report
    expected = [list(r) for r in enumerate_multi_indices(p, k_max)]
    n_moments = count_multi_indices(p, k_max)
    total = 0
    for s, sg in enumerate(subgroups):
        where = f"subgroup {s}"
        n = sg.get("n")
        if not isinstance(n, int) or n < 2:
            bad(f"{where}: n must be an integer >= 2, got {n!r}")
            continue
        total += n
        means = np.asarray(sg.get("means", []), dtype=float)
        variances = np.asarray(sg.get("variances", []), dtype=float)
        if means.size != p or variances.size != p:
            bad(f"{where}: means/variances must have length {p}")
            continue
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            bad(f"{where}: non-finite means or variances")
        if np.any(variances <= 0):
            bad(f"{where}: variances must be positive")
        items = sg.get("std_moments", [])
        if len(items) != n_moments:
            bad(f"{where}: {len(items)} std_moments, expected {n_moments}")
            continue
        idx = [list(it["r"]) for it in items]
        if idx != expected:
            bad(f"{where}: std_moments are not in canonical order or have wrong indices")
            continue
        values = np.array([it["value"] for it in items], dtype=float)
        if not np.all(np.isfinite(values)):
            bad(f"{where}: non-finite std_moments")
            continue
        lookup = {tuple(r): v for r, v in zip(idx, values)}
        second = (n - 1) / n
        corr = np.empty((p, p))
        for a in range(p):
            e = [0] * p
            e[a] = 1
            if abs(lookup[tuple(e)]) > tol:
                bad(f"{where}: order-1 moment at {tuple(e)} is {lookup[tuple(e)]!r}, expected 0")
            if k_max >= 2:
                for b in range(a, p):
                    e2 = [0] * p
                    e2[a] += 1
                    e2[b] += 1
                    corr[a, b] = corr[b, a] = lookup[tuple(e2)]
                if abs(corr[a, a] - second) > tol:
                    bad(f"{where}: order-2 moment at {tuple(2 if j == a else 0 for j in range(p))} "
                        f"is {corr[a, a]!r}, expected {second!r}")
        if k_max >= 2:
            low = float(np.linalg.eigvalsh(corr).min())
            if low < -tol:
                bad(f"{where}: order-2 moment matrix is not positive semidefinite (min eigenvalue {low:.3g})")
    if "n_total" in doc and doc["n_total"] != total:
        bad(f"n_total {doc['n_total']} does not match subgroup sizes ({total})")
    return report


def load_summaries(directory: str | Path) -> list[ProviderSummary]:
    """Every ``*.json`` summary in ``directory``, sorted by file name."""
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise ValidationError(f"no summary files in {directory}")
    out = []
    for path in paths:
        report = validate_summary(path)
        if not report.ok:
            raise ValidationError(f"{path.name}: " + "; ".join(report.violations))
        out.append(ProviderSummary.load(path))
    names = out[0].variable_names
    for s in out[1:]:
        if s.variable_names != names:
            raise ValidationError(f"provider {s.provider_id} has variables {s.variable_names}, expected {names}")
    return out


def generate_pooled(
    summaries: Sequence[ProviderSummary],
    opts: SolverOptions = SolverOptions(),
    workers: int | None = None,
    strict: bool = True,
) -> pd.DataFrame:
    """Pseudo-data for all providers, stacked in provider order."""
    if not summaries:
        raise ValidationError("no provider summaries to generate from")
    frames = [pseudo_frame(generate_provider(s, opts, workers, strict)) for s in summaries]
    return pd.concat(frames, ignore_index=True)


def standardize_columns(frame: pd.DataFrame, columns: Iterable[str]) -> tuple[pd.DataFrame, dict]:
    """Z-score the named columns with constants from ``frame`` itself."""
    frame = frame.copy()
    constants = {}
    for c in columns:
        if c not in frame.columns:
            raise ValidationError(f"cannot standardize unknown column {c!r}")
        mean, sd = float(frame[c].mean()), float(frame[c].std(ddof=1))
        if not sd > 0:
            raise ValidationError(f"cannot standardize constant column {c!r}")
        frame[c] = (frame[c] - mean) / sd
        constants[c] = {"mean": mean, "sd": sd}
    return frame, constants


def fit_frame(
    frame: pd.DataFrame,
    formula: str,
    family: str = "gaussian",
    random_intercept: str | None = None,
    std: Iterable[str] = (),
    nagq: int = 1,
) -> dict:
    """Fit a GLM or random-intercept GLMM and return the JSON-ready report."""
    fam = get_family(family)
    frame, constants = standardize_columns(frame, std)
    f = Formula.parse(formula)
    y, X, names = f.design(frame)
    if random_intercept is None:
        report = fit_glm(y, X, fam, names).to_dict()
    else:
        if random_intercept not in frame.columns:
            raise ValidationError(f"grouping column {random_intercept!r} not found")
        spec = MixedModelSpec(y, X, frame[random_intercept].astype(str).to_numpy(), fam, names)
        result = fit_lmm(spec) if fam.name == "gaussian" else fit_glmm(spec, nagq=nagq)
        report = result.to_dict()
    report["formula"] = str(f)
    report["standardized"] = constants
    if random_intercept is not None:
        report["random_intercept"] = random_intercept
    return report


def dump_json(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
