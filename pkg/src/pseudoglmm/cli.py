"""Command-line entry point: ``pseudoglmm {aggregate,validate,generate,fit,simulate}``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from .errors import NumericalError, ValidationError
from .federation import (
    PipelineConfig,
    dump_json,
    export_by_group,
    export_summary,
    fit_frame,
    generate_pooled,
    load_summaries,
    validate_summary,
)
from .pseudogen import SolverOptions, generate_provider, pseudo_frame, read_pseudo_csv, write_pseudo_csv
from .simharness import aggregate_report, get_setting, run_study

log = logging.getLogger("pseudoglmm")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # bad arguments are invalid input, not a numerical failure
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _names(values: list[str] | None) -> list[str]:
    """Accept both ``--vars a b`` and ``--vars a,b``."""
    out: list[str] = []
    for v in values or []:
        out.extend(s.strip() for s in v.split(",") if s.strip())
    return out


def _solver(args) -> SolverOptions:
    try:
        return SolverOptions(
            max_iterations=args.max_iterations,
            residual_tolerance=args.tolerance,
            seed=args.seed,
            max_restarts=args.restarts,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def cmd_aggregate(args) -> int:
    variables = _names(args.vars)
    if not variables:
        raise ValidationError("--vars needs at least one variable")
    config = PipelineConfig(k_max=args.k_max, subgroup_base=args.base, subgroup_cap=args.cap,
                            shuffle_seed=args.shuffle_seed)
    categorical = _names(args.categorical)
    if args.group_col:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        summaries = export_by_group(args.input, variables, args.group_col, config, categorical, out_dir)
        for pid, s in summaries.items():
            print(f"{pid}: n={s.n_total} subgroups={[sg.n for sg in s.subgroups]}")
        return EXIT_OK
    provider = args.provider_id or Path(args.input).stem
    s = export_summary(args.input, variables, config, provider, categorical, out=args.out)
    print(f"{provider}: n={s.n_total} subgroups={[sg.n for sg in s.subgroups]} "
          f"moments per subgroup={len(s.subgroups[0].std_moments)}")
    return EXIT_OK


def cmd_validate(args) -> int:
    status = EXIT_OK
    for path in args.files:
        report = validate_summary(path)
        print(f"{path}: {report}")
        if not report.ok:
            status = EXIT_INVALID
    return status


def cmd_generate(args) -> int:
    summaries = load_summaries(args.summaries)
    opts = _solver(args)
    strict = not args.lenient
    if args.per_provider:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for s in summaries:
            frame = pseudo_frame(generate_provider(s, opts, args.workers, strict))
            write_pseudo_csv(frame, out_dir / f"{s.provider_id}.csv")
    else:
        frame = generate_pooled(summaries, opts, args.workers, strict)
        write_pseudo_csv(frame, args.out)
    print(f"wrote pseudo-data for {len(summaries)} providers to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    frame = read_pseudo_csv(args.data)
    report = fit_frame(frame, args.formula, args.family, args.random_intercept, _names(args.std), args.nagq)
    if args.out:
        dump_json(report, args.out)
    for c in report["coefficients"]:
        print(f"{c['name']:>16s} {c['estimate']: .6f}  se {c['se']:.6f}  "
              f"[{c['ci_lower']: .6f}, {c['ci_upper']: .6f}]")
    if "sigma_u" in report:
        print(f"{'sigma_u':>16s} {report['sigma_u']: .6f}")
    print(f"{'loglik':>16s} {report['loglik']: .6f}  aic {report['aic']:.6f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    k_list = tuple(int(k) for k in _names(args.k))
    setting = get_setting(
        args.setting, reps=args.reps, seed=args.seed, k_list=k_list,
        solver=SolverOptions(max_iterations=args.max_iterations, max_restarts=0),
    )
    bundles = run_study(setting, workers=args.workers)
    report = aggregate_report(bundles, setting)
    report.write(args.out)
    failed = sum(1 for b in bundles if b.errors)
    print(f"{setting.name}: {len(bundles)} replicates ({failed} with failures), report in {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudoglmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("aggregate", help="summarize a provider CSV into a moment file")
    p.add_argument("--input", required=True)
    p.add_argument("--vars", nargs="+", required=True, help="variables to summarize (space or comma separated)")
    p.add_argument("--categorical", nargs="*", help="columns to dummy-code (text columns always are)")
    p.add_argument("--out", required=True, help="summary JSON, or a directory with --group-col")
    p.add_argument("--provider-id")
    p.add_argument("--group-col", help="split the file into one provider per value of this column")
    p.add_argument("--k-max", type=int, default=4)
    p.add_argument("--base", type=int, default=250)
    p.add_argument("--cap", type=int, default=500)
    p.add_argument("--shuffle-seed", type=int, help="shuffle rows before partitioning")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("validate", help="check summary files")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("generate", help="pseudo-data from a directory of summaries")
    p.add_argument("--summaries", required=True)
    p.add_argument("--out", required=True, help="pooled CSV, or a directory with --per-provider")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-provider", action="store_true")
    p.add_argument("--workers", type=int, help="parallel subgroups (default from PSEUDOGLMM_WORKERS or 1)")
    p.add_argument("--tolerance", type=float, default=1e-8, help="max moment residual")
    p.add_argument("--max-iterations", type=int, default=500)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--lenient", action="store_true", help="keep unconverged subgroups instead of failing")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a GLM or random-intercept GLMM to a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--formula", required=True)
    p.add_argument("--family", default="gaussian", choices=["gaussian", "soft_binomial", "soft_poisson"])
    p.add_argument("--random-intercept", help="grouping column, e.g. group_id")
    p.add_argument("--std", nargs="*", help="columns to z-score before fitting")
    p.add_argument("--nagq", type=int, default=1)
    p.add_argument("--out", help="JSON report")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run the pseudo-data simulation study")
    p.add_argument("--setting", default="m30n100")
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--k", nargs="+", default=["2,3,4"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-iterations", type=int, default=60, help="solver budget per group")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError, pd.errors.ParserError,
            pd.errors.EmptyDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
