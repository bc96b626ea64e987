"""Actual-vs-pseudo comparison on the public New York SPARCS 2022 discharge extract.

Not part of the automated suite: the CSV is a large public download
(health.data.ny.gov, "Hospital Inpatient Discharges (SPARCS De-Identified) 2022").
Usage::

    python3 scripts/reproduce_sparcs.py discharges_2022.csv --tolerance 0.001 [--workers 8]

The file needs a 0/1 ``covid`` column (positive test indicator) prepared by
the user; the remaining columns are mapped from the public names below.
Exit code is 0 when every coefficient and sigma_u agree within the tolerance.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np
import pandas as pd

from pseudoglmm.federation import PipelineConfig, export_by_group, fit_frame, generate_pooled
from pseudoglmm.pseudogen import SolverOptions

COLUMNS = {
    "Facility Id": "facility",
    "Length of Stay": "los",
    "Total Charges": "charges",
    "Gender": "gender",
    "Emergency Department Indicator": "emergency",
}

MODELS = [
    ("charges ~ los + covid + gender[M] + emergency", "gaussian", ["charges", "los"]),
    ("covid ~ los + charges + gender[M] + emergency", "soft_binomial", ["charges", "los"]),
    ("los ~ covid + charges + gender[M] + emergency", "soft_poisson", ["charges"]),
]


def load(path: str) -> pd.DataFrame:
    raw = pd.read_csv(path, low_memory=False)
    df = raw.rename(columns=COLUMNS)
    missing = [c for c in [*COLUMNS.values(), "covid"] if c not in df.columns]
    if missing:
        sys.exit(f"missing columns: {missing}")
    df = df[[*COLUMNS.values(), "covid"]].copy()
    df["los"] = pd.to_numeric(df["los"].astype(str).str.replace("+", "", regex=False).str.strip(), errors="coerce")
    df["charges"] = pd.to_numeric(df["charges"].astype(str).str.replace(r"[$,]", "", regex=True), errors="coerce")
    df["emergency"] = df["emergency"].map({"Y": 1.0, "N": 0.0})
    df = df[df["gender"].isin(["F", "M"])]
    df = df.dropna()
    # providers with a constant column cannot be standardized
    keep = df.groupby("facility").filter(lambda b: len(b) >= 2 and (b.drop(columns=["facility", "gender"]).std() > 0).all()
                                          and b["gender"].nunique() == 2)
    return keep.reset_index(drop=True)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv")
    ap.add_argument("--tolerance", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args(argv)

    t0 = time.perf_counter()
    df = load(args.csv)
    print(f"{df['facility'].nunique()} providers, {len(df)} rows after filtering")
    summaries = export_by_group(df, ["los", "charges", "gender", "covid", "emergency"], "facility", PipelineConfig())
    pseudo = generate_pooled(list(summaries.values()), SolverOptions(seed=args.seed), workers=args.workers,
                             strict=False)
    actual = df.assign(**{"gender[M]": (df["gender"] == "M").astype(float)})
    print(f"pseudo-data: {len(pseudo)} rows in {time.perf_counter() - t0:.0f}s")

    worst = 0.0
    for formula, family, std in MODELS:
        ps = fit_frame(pseudo, formula, family, random_intercept="group_id", std=std)
        ac = fit_frame(actual, formula, family, random_intercept="facility", std=std)
        print(f"\n{family}: {formula}")
        print(f"{'term':<14}{'pseudo':>12}{'actual':>12}")
        for p, a in zip(ps["coefficients"], ac["coefficients"]):
            print(f"{p['name']:<14}{p['estimate']:>12.4f}{a['estimate']:>12.4f}")
            worst = max(worst, abs(p["estimate"] - a["estimate"]))
        print(f"{'sigma_u':<14}{ps['sigma_u']:>12.4f}{ac['sigma_u']:>12.4f}")
        worst = max(worst, abs(ps["sigma_u"] - ac["sigma_u"]))

    ok = bool(np.isfinite(worst) and worst <= args.tolerance)
    print(f"\nmax |pseudo - actual| = {worst:.2e} (tolerance {args.tolerance:g}): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
