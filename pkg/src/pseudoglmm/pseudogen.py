"""Moment-matched pseudo-data synthesis.

For each subgroup summary we look for an unconstrained ``n x p`` matrix on
the standardized scale whose raw moments equal the exported standardized
moments, by Levenberg-Marquardt on the moment residuals. The solution is
then mapped back with ``x = mean + s * z``. No column is forced to stay
binary or integer.
"""

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import NumericalError
from .moments import ProviderSummary, SubgroupSummary, index_matrix, monomials, power_table

log = logging.getLogger(__name__)

WORKERS_ENV = "PSEUDOGLMM_WORKERS"


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 500
    residual_tolerance: float = 1e-8  # on max |residual|
    step_tolerance: float = 1e-15
    initial_damping: float = 1e-3
    seed: int = 0
    max_restarts: int = 3
    damping_decrease: float = 0.5
    damping_increase: float = 2.0
    polish_second_order: bool = False

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if min(self.residual_tolerance, self.step_tolerance, self.initial_damping) <= 0:
            raise ValueError("tolerances and initial damping must be positive")


@dataclass
class LMDiagnostics:
    converged: bool
    iterations: int
    evaluations: int
    max_residual: float
    cost: float
    damping: float
    message: str
    cost_history: list[float] = field(default_factory=list, repr=False)


class _DampedSolver:
    """Solves ``(J'J + lam I) d = -J'r`` for varying ``lam`` at a fixed J.

    When J is wide the same step is obtained from the smaller system
    ``d = -J' (JJ' + lam I)^-1 r``. The Gram matrix is formed once per J.
    """

    def __init__(self, J: np.ndarray, r: np.ndarray):
        self.J = J
        m, k = J.shape
        self.wide = m < k
        a = np.asfortranarray(J)
        # syrk fills the upper triangle only, which is all the solver reads
        self.gram = scipy.linalg.blas.dsyrk(1.0, a, trans=0 if self.wide else 1)
        self.rhs = r if self.wide else J.T @ r

    def step(self, lam: float) -> np.ndarray:
        A = self.gram.copy()
        A[np.diag_indices_from(A)] += lam
        try:
            c = scipy.linalg.cho_factor(A, lower=False, check_finite=False)
            w = scipy.linalg.cho_solve(c, self.rhs, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            full = np.triu(A) + np.triu(A, 1).T
            w = np.linalg.lstsq(full, self.rhs, rcond=None)[0]
        return -(self.J.T @ w) if self.wide else -w


def levenberg_marquardt(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    opts: SolverOptions = SolverOptions(),
) -> tuple[np.ndarray, LMDiagnostics]:
    """Minimize ``||residual_fn(x)||^2`` from ``x0``.

    Stops when ``max |r| <= opts.residual_tolerance``. Otherwise the last
    accepted iterate is returned with ``converged=False``. Each trial step
    counts as one iteration.
    """
    x = np.array(x0, dtype=float).ravel()
    r = np.asarray(residual_fn(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise NumericalError("non-finite residuals at the starting point")
    lam = opts.initial_damping
    cost = float(r @ r)
    history = [cost]
    evaluations = 1
    solver = None
    message = "max iterations reached"
    it = 0
    while True:
        if np.max(np.abs(r), initial=0.0) <= opts.residual_tolerance:
            message = "residual tolerance reached"
            break
        if it >= opts.max_iterations:
            break
        if solver is None:
            J = np.asarray(jacobian_fn(x), dtype=float)
            if J.shape != (r.size, x.size):
                raise ValueError(f"jacobian has shape {J.shape}, expected {(r.size, x.size)}")
            solver = _DampedSolver(J, r)
        it += 1
        delta = solver.step(lam)
        x_new = x + delta
        r_new = np.asarray(residual_fn(x_new), dtype=float)
        evaluations += 1
        cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        if cost_new < cost:
            x, r, cost = x_new, r_new, cost_new
            history.append(cost)
            lam *= opts.damping_decrease
            solver = None
        else:
            lam *= opts.damping_increase
        if np.linalg.norm(delta) <= opts.step_tolerance * (np.linalg.norm(x) + opts.step_tolerance):
            message = "step below tolerance"
            break
        if lam > 1e16:
            message = "damping overflow"
            break
    max_res = float(np.max(np.abs(r), initial=0.0))
    diag = LMDiagnostics(
        converged=max_res <= opts.residual_tolerance,
        iterations=it,
        evaluations=evaluations,
        max_residual=max_res,
        cost=cost,
        damping=lam,
        message=message,
        cost_history=history,
    )
    return x, diag


@dataclass
class MomentResidualProblem:
    """Standardized-moment targets for an ``n x p`` unknown matrix."""

    exponents: np.ndarray  # (n_moments, p)
    targets: np.ndarray  # (n_moments,)
    n: int

    @classmethod
    def from_summary(cls, summary: SubgroupSummary) -> "MomentResidualProblem":
        return cls(index_matrix(summary.indices), summary.targets, summary.n)

    @property
    def p(self) -> int:
        return self.exponents.shape[1]

    @property
    def n_moments(self) -> int:
        return self.exponents.shape[0]

    @property
    def k_max(self) -> int:
        return int(self.exponents.sum(axis=1).max())

    @property
    def underdetermined(self) -> bool:
        return self.n * self.p > self.n_moments

    def _matrix(self, x: np.ndarray) -> np.ndarray:
        z = np.asarray(x, dtype=float).reshape(self.n, self.p)
        if not np.all(np.isfinite(z)):
            raise NumericalError("pseudo values became non-finite")
        return z

    def residuals(self, x: np.ndarray) -> np.ndarray:
        z = self._matrix(x)
        return monomials(z, self.exponents).mean(axis=0) - self.targets

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """``n_moments x (n p)`` matrix; column ``i * p + j`` is d/dz_ij.

        Returned as a transposed view of a row-major ``(n p) x n_moments`` buffer.
        """
        z = self._matrix(x)
        n, p = z.shape
        E = self.exponents
        n_moments = E.shape[0]
        P = power_table(z, self.k_max)
        factors = [P[:, j, :][:, E[:, j]] for j in range(p)]  # each (n, n_moments)
        # prefix/suffix products of the per-variable factors, excluding j
        prefix = [np.ones((n, n_moments))]
        for j in range(p - 1):
            prefix.append(prefix[-1] * factors[j])
        suffix = np.ones((n, n_moments))
        D = np.empty((n, p, n_moments))
        lowered = np.maximum(E - 1, 0)
        for j in range(p - 1, -1, -1):
            D[:, j, :] = (E[:, j] / n) * P[:, j, :][:, lowered[:, j]] * prefix[j] * suffix
            suffix = suffix * factors[j]
        return D.reshape(n * p, n_moments).T


@dataclass
class PseudoDataset:
    values: np.ndarray  # (n, p), original scale
    variable_names: list[str]
    group_id: str
    subgroup_index: int
    achieved_max_residual: float
    solver_iterations: int
    converged: bool = True

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=self.variable_names)
        df["group_id"] = self.group_id
        df["subgroup"] = self.subgroup_index
        return df


def match_second_order(z: np.ndarray, summary: SubgroupSummary) -> np.ndarray:
    """Affinely adjust ``z`` so its order-1 and order-2 moments equal the targets exactly.

    The LM iterate typically matches these to the solver tolerance already;
    this removes the remaining error, which is what Gaussian fits depend on.
    Returns ``z`` unchanged if either covariance is not positive definite.
    """
    p = summary.p
    if summary.k_max < 2:
        return z
    targets = summary.std_moments
    mean_t = np.array([targets[tuple(int(a == j) for a in range(p))] for j in range(p)])
    cov_t = summary.order2_matrix() - np.outer(mean_t, mean_t)
    mean_z = z.mean(axis=0)
    dz = z - mean_z
    cov_z = dz.T @ dz / z.shape[0]
    try:
        lz = np.linalg.cholesky(cov_z)
        lt = np.linalg.cholesky(cov_t)
    except np.linalg.LinAlgError:
        return z
    # z' = mean_t + dz A with A' cov_z A = cov_t, A = lz^-T lt'
    A = scipy.linalg.solve_triangular(lz, lt.T, lower=True, trans="T")
    return mean_t + dz @ A


def _seed_sequence(seed: int, group_id: str, subgroup_index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(group_id.encode("utf-8")), subgroup_index, attempt])


def generate_pseudo_data(
    summary: SubgroupSummary,
    opts: SolverOptions = SolverOptions(),
    *,
    variable_names: Sequence[str] | None = None,
    group_id: str = "",
    subgroup_index: int = 0,
    init: np.ndarray | None = None,
    strict: bool = True,
) -> PseudoDataset:
    """Synthesize ``summary.n`` rows whose standardized moments match ``summary``.

    ``init`` is an optional original-scale starting matrix; otherwise each
    attempt starts from seeded standard normal draws. With ``strict=False``
    a non-converged best attempt is returned (flagged) instead of raising.
    """
    problem = MomentResidualProblem.from_summary(summary)
    n, p = problem.n, problem.p
    if variable_names is None:
        variable_names = [f"x{j + 1}" for j in range(p)]
    if not problem.underdetermined:
        log.warning(
            "subgroup %s/%d: n*p=%d <= %d moment constraints; pseudo-data may reproduce the source rows",
            group_id, subgroup_index, n * p, problem.n_moments,
        )
    scales = summary.scales
    best_x, best = None, None
    for attempt in range(opts.max_restarts + 1):
        if attempt == 0 and init is not None:
            z0 = (np.asarray(init, dtype=float).reshape(n, p) - summary.means) / scales
        else:
            z0 = _seed_sequence(opts.seed, group_id, subgroup_index, attempt).standard_normal((n, p))
        x, diag = levenberg_marquardt(problem.residuals, problem.jacobian, z0.ravel(), opts)
        if best is None or diag.max_residual < best.max_residual:
            best_x, best = x, diag
        if diag.converged:
            break
        log.info("subgroup %s/%d attempt %d stopped at max residual %.3g (%s)",
                 group_id, subgroup_index, attempt, diag.max_residual, diag.message)
    if not best.converged:
        msg = (f"pseudo-data generation for subgroup {group_id}/{subgroup_index} did not converge: "
               f"best max residual {best.max_residual:.3g} > {opts.residual_tolerance:g}")
        if strict:
            raise NumericalError(msg, best_residual=best.max_residual)
        log.info(msg)
    z = best_x.reshape(n, p)
    if opts.polish_second_order:
        z = match_second_order(z, summary)
    achieved = float(np.max(np.abs(problem.residuals(z.ravel()))))
    return PseudoDataset(
        values=summary.means + z * scales,
        variable_names=list(variable_names),
        group_id=group_id,
        subgroup_index=subgroup_index,
        achieved_max_residual=achieved,
        solver_iterations=best.iterations,
        converged=best.converged,
    )


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def generate_provider(
    summary: ProviderSummary,
    opts: SolverOptions = SolverOptions(),
    workers: int | None = None,
    strict: bool = True,
) -> list[PseudoDataset]:
    """Pseudo-data for every subgroup of one provider, in subgroup order."""

    def run(item: tuple[int, SubgroupSummary]) -> PseudoDataset:
        s, sg = item
        try:
            return generate_pseudo_data(
                sg, opts, variable_names=summary.variable_names,
                group_id=summary.provider_id, subgroup_index=s, strict=strict,
            )
        except NumericalError as exc:
            raise NumericalError(f"provider {summary.provider_id!r}: {exc}", exc.best_residual) from exc

    items = list(enumerate(summary.subgroups))
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(items) == 1:
        return [run(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))


def pseudo_frame(datasets: Sequence[PseudoDataset]) -> pd.DataFrame:
    """Stack subgroup outputs into one table with ``group_id`` and ``subgroup`` columns."""
    return pd.concat([d.frame() for d in datasets], ignore_index=True)


def write_pseudo_csv(df: pd.DataFrame, path: str | Path) -> None:
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_pseudo_csv(path: str | Path) -> pd.DataFrame:
    """Read a CSV back without losing the last bits of each double."""
    return pd.read_csv(path, float_precision="round_trip")
