"""Random-intercept mixed models.

``fit_lmm`` maximizes the exact Gaussian marginal likelihood, profiling out
the fixed effects and residual variance so only the variance ratio is
searched. ``fit_glmm`` integrates each group's random intercept with
adaptive Gauss-Hermite quadrature centred at the conditional mode
(``nagq=1`` is the Laplace approximation) and maximizes over
``(beta, log sigma_u)`` by L-BFGS-B using an analytic gradient.

Everything is maximum likelihood; there is no REML option.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.sparse
from scipy.special import logsumexp
from scipy.stats import norm

from .errors import NumericalError, ValidationError
from .families import GAUSSIAN, FamilySpec, get_family
from .glm import _check_design, fit_glm, information_criteria

log = logging.getLogger(__name__)

LOG_SIGMA_BOUNDARY = -8.0
LOG_SIGMA_BOUNDS = (-10.0, 5.0)
MAX_NAGQ = 25
_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def wald_ci(estimate, se, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """``estimate -/+ z_{(1+level)/2} * se``."""
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    z = norm.ppf(0.5 * (1 + level))
    estimate = np.asarray(estimate, dtype=float)
    half = z * np.asarray(se, dtype=float)
    return estimate - half, estimate + half


@dataclass
class MixedModelSpec:
    y: np.ndarray
    X: np.ndarray
    groups: np.ndarray
    family: FamilySpec = GAUSSIAN
    column_names: list[str] | None = None

    def __post_init__(self) -> None:
        self.family = get_family(self.family)
        self.y, self.X = _check_design(self.y, self.X)
        groups = np.asarray(self.groups)
        if groups.shape[0] != self.y.size:
            raise ValidationError(f"{groups.shape[0]} group labels for {self.y.size} rows")
        self.groups = groups
        self.levels, self.codes = np.unique(groups, return_inverse=True)
        self.codes = self.codes.ravel()
        if self.column_names is None:
            self.column_names = [f"b{j}" for j in range(self.X.shape[1])]

    @property
    def m(self) -> int:
        return len(self.levels)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.codes, minlength=self.m)


@dataclass
class MixedFitResult:
    family: str
    beta: np.ndarray
    standard_errors: np.ndarray
    covariance: np.ndarray
    sigma_u: float
    residual_sigma: float | None
    blups: np.ndarray
    group_levels: np.ndarray
    loglik: float
    aic: float
    bic: float
    n: int
    m: int
    nagq: int
    converged: bool
    iterations: int
    boundary: bool
    column_names: list[str]
    theta: np.ndarray = field(repr=False, default=None)
    loglik_history: list[float] = field(repr=False, default_factory=list)

    @property
    def coefficients(self) -> np.ndarray:
        return self.beta

    def conf_int(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        return wald_ci(self.beta, self.standard_errors, level)

    def to_dict(self, level: float = 0.95) -> dict:
        lo, hi = self.conf_int(level)
        return {
            "model": "glmm",
            "family": self.family,
            "coefficients": [
                {"name": nm, "estimate": float(b), "se": float(s), "ci_lower": float(a), "ci_upper": float(c)}
                for nm, b, s, a, c in zip(self.column_names, self.beta, self.standard_errors, lo, hi)
            ],
            "ci_level": level,
            "sigma_u": self.sigma_u,
            "residual_sigma": self.residual_sigma,
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "n": self.n,
            "m": self.m,
            "nagq": self.nagq,
            "boundary": self.boundary,
            "converged": self.converged,
            "iterations": self.iterations,
        }


# ---------------------------------------------------------------- linear


class _ProfiledGaussian:
    """Profiled ML log-likelihood of the random-intercept LMM as a function of
    ``gamma = sigma_u^2 / sigma^2``."""

    def __init__(self, spec: MixedModelSpec):
        self.spec = spec
        self.sizes = spec.group_sizes.astype(float)
        G = scipy.sparse.csr_matrix(
            (np.ones(spec.n), (spec.codes, np.arange(spec.n))), shape=(spec.m, spec.n)
        )
        self.Sx = np.asarray(G @ spec.X)
        self.Sy = np.asarray(G @ spec.y).ravel()
        self.xtx = spec.X.T @ spec.X
        self.xty = spec.X.T @ spec.y

    def solve(self, gamma: float) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
        c = gamma / (1.0 + self.sizes * gamma)
        A = self.xtx - self.Sx.T @ (self.Sx * c[:, None])
        b = self.xty - self.Sx.T @ (c * self.Sy)
        beta = np.linalg.solve(A, b)
        resid = self.spec.y - self.spec.X @ beta
        rsum = np.bincount(self.spec.codes, weights=resid, minlength=self.spec.m)
        rss = float(resid @ resid - np.sum(c * rsum**2))
        return beta, rss, A, c * rsum

    def loglik(self, gamma: float) -> float:
        _, rss, _, _ = self.solve(gamma)
        n = self.spec.n
        if rss <= 0:
            return -np.inf
        return -0.5 * n * (np.log(2 * np.pi * rss / n) + 1.0) - 0.5 * np.sum(np.log1p(self.sizes * gamma))


def fit_lmm(spec: MixedModelSpec) -> MixedFitResult:
    """ML fit of ``y = X beta + u_group + e`` with Gaussian ``u`` and ``e``."""
    if spec.family.name != "gaussian":
        raise ValidationError("fit_lmm needs the gaussian family; use fit_glmm otherwise")
    if spec.m < 2:
        raise ValidationError("a random intercept needs at least 2 groups; sigma_u is not identifiable")
    prof = _ProfiledGaussian(spec)

    def objective(t: float) -> float:
        return -prof.loglik(np.exp(t))

    grid = np.linspace(-20.0, 12.0, 65)
    values = np.array([objective(t) for t in grid])
    k = int(np.argmin(values))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = scipy.optimize.minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                                         options={"xatol": 1e-12, "maxiter": 500})
    gamma, best = float(np.exp(res.x)), float(res.fun)
    boundary = False
    if objective(-np.inf) <= best or res.x <= grid[0] + 1e-6:
        gamma, best, boundary = 0.0, objective(-np.inf), True
    if not np.isfinite(best):
        raise NumericalError("LMM profiled likelihood is not finite")

    beta, rss, A, blups = prof.solve(gamma)
    sigma2 = rss / spec.n
    cov = sigma2 * np.linalg.inv(A)
    cov = 0.5 * (cov + cov.T)
    loglik = -best
    n_params = spec.X.shape[1] + 2
    aic, bic = information_criteria(loglik, n_params, spec.n)
    return MixedFitResult(
        family="gaussian",
        beta=beta,
        standard_errors=np.sqrt(np.diag(cov)),
        covariance=cov,
        sigma_u=float(np.sqrt(gamma * sigma2)),
        residual_sigma=float(np.sqrt(sigma2)),
        blups=blups,
        group_levels=spec.levels,
        loglik=loglik,
        aic=aic,
        bic=bic,
        n=spec.n,
        m=spec.m,
        nagq=0,
        converged=bool(res.success),
        iterations=int(res.nfev) + len(grid),
        boundary=boundary,
        column_names=list(spec.column_names),
    )


# ---------------------------------------------------------- generalized


class LaplaceObjective:
    """Approximate marginal log-likelihood of a random-intercept GLMM.

    Parameters are packed as ``theta = (beta, log sigma_u)`` plus
    ``log sigma_e`` for the gaussian family.
    """

    def __init__(self, spec: MixedModelSpec, nagq: int = 1, inner_tol: float = 1e-12, inner_max: int = 100):
        if nagq < 1 or nagq > MAX_NAGQ:
            raise ValueError(f"nagq must be in 1..{MAX_NAGQ}, got {nagq}")
        self.spec = spec
        self.fam = spec.family
        self.nagq = nagq
        self.nodes, self.weights = np.polynomial.hermite.hermgauss(nagq)
        self.log_w = np.log(self.weights) + self.nodes**2
        self.inner_tol = inner_tol
        self.inner_max = inner_max
        self.G = scipy.sparse.csr_matrix(
            (np.ones(spec.n), (spec.codes, np.arange(spec.n))), shape=(spec.m, spec.n)
        )
        self.sizes = spec.group_sizes.astype(float)
        self.p = spec.X.shape[1]
        self.gaussian = self.fam.estimate_dispersion
        self.last_modes = np.zeros(spec.m)

    @property
    def n_params(self) -> int:
        return self.p + (2 if self.gaussian else 1)

    def _gsum(self, v: np.ndarray) -> np.ndarray:
        return np.bincount(self.spec.codes, weights=v, minlength=self.spec.m)

    def _unpack(self, theta: np.ndarray) -> tuple[np.ndarray, float, float]:
        beta = theta[: self.p]
        sigma2 = float(np.exp(2.0 * theta[self.p]))
        phi = float(np.exp(2.0 * theta[self.p + 1])) if self.gaussian else 1.0
        return beta, sigma2, phi

    def _g(self, eta_fixed, u, sigma2, phi):
        eta = eta_fixed + u[self.spec.codes]
        return self._gsum(self.fam.unit_loglik(self.spec.y, eta, phi)) - 0.5 * u**2 / sigma2

    def modes(self, eta_fixed: np.ndarray, sigma2: float, phi: float) -> np.ndarray:
        """Conditional modes of the random intercepts by safeguarded Newton."""
        y, codes, fam = self.spec.y, self.spec.codes, self.fam
        u = np.zeros(self.spec.m)
        g_old = self._g(eta_fixed, u, sigma2, phi)
        for _ in range(self.inner_max):
            eta = eta_fixed + u[codes]
            grad = self._gsum(y - fam.inverse_link(eta)) / phi - u / sigma2
            hess = self._gsum(fam.b2(eta)) / phi + 1.0 / sigma2
            step = grad / hess
            u_new = u + step
            g_new = self._g(eta_fixed, u_new, sigma2, phi)
            for _ in range(40):
                bad = ~(g_new >= g_old - 1e-12 * np.abs(g_old))
                if not bad.any():
                    break
                step = np.where(bad, 0.5 * step, step)
                u_new = u + step
                g_new = np.where(bad, self._g(eta_fixed, u_new, sigma2, phi), g_new)
            else:
                raise NumericalError("inner Newton step-halving failed to increase the conditional density")
            u, g_old = u_new, g_new
            if np.max(np.abs(step) / (1.0 + np.abs(u))) < self.inner_tol:
                break
        else:
            raise NumericalError("inner Newton did not converge")
        if not np.all(np.isfinite(u)):
            raise NumericalError("non-finite conditional modes")
        return u

    def evaluate(self, theta: np.ndarray, gradient: bool = True) -> tuple[float, np.ndarray | None]:
        """Return ``(loglik, d loglik / d theta)``."""
        theta = np.asarray(theta, dtype=float)
        spec, fam = self.spec, self.fam
        y, X, codes = spec.y, spec.X, spec.codes
        beta, sigma2, phi = self._unpack(theta)
        eta_fixed = X @ beta
        u_hat = self.modes(eta_fixed, sigma2, phi)
        self.last_modes = u_hat
        eta_hat = eta_fixed + u_hat[codes]
        b2_hat = fam.b2(eta_hat)
        H = self._gsum(b2_hat) / phi + 1.0 / sigma2
        s_hat = 1.0 / np.sqrt(H)

        # quadrature nodes per group: (m, q)
        U = u_hat[:, None] + np.sqrt(2.0) * s_hat[:, None] * self.nodes[None, :]
        q = self.nagq
        gk = np.empty_like(U)
        etas = []
        for k in range(q):
            eta_k = eta_fixed + U[codes, k]
            etas.append(eta_k)
            gk[:, k] = self._gsum(fam.unit_loglik(y, eta_k, phi)) - 0.5 * U[:, k] ** 2 / sigma2
        a = self.log_w[None, :] + gk
        lse = logsumexp(a, axis=1)
        ll_groups = -_HALF_LOG_2PI - 0.5 * np.log(sigma2) + np.log(np.sqrt(2.0) * s_hat) + lse
        ll = float(np.sum(ll_groups))
        if not np.isfinite(ll):
            raise NumericalError("approximate log-likelihood is not finite")
        if not gradient:
            return ll, None

        pi = np.exp(a - lse[:, None])  # (m, q) node weights
        # g'(u_k) and the per-observation weights for direct beta terms
        gprime = np.empty_like(U)
        omega = np.zeros(spec.n)
        for k in range(q):
            resid = y - fam.inverse_link(etas[k])
            gprime[:, k] = self._gsum(resid) / phi - U[:, k] / sigma2
            omega += pi[codes, k] * resid / phi
        A = np.sum(pi * gprime, axis=1)
        B = np.sum(pi * gprime * np.sqrt(2.0) * self.nodes[None, :], axis=1) * s_hat
        Hp = self._gsum(fam.b3(eta_hat)) / phi

        P = self.n_params
        dgp = np.empty((spec.m, P))  # d g'(u_hat) / d theta at fixed u
        dH = np.empty((spec.m, P))  # d H(u_hat) / d theta at fixed u
        direct = np.empty(P)  # sum_i sum_k pi_ik d g(u_ik) / d theta at fixed u
        dgp[:, : self.p] = -np.asarray(self.G @ (X * (b2_hat / phi)[:, None]))
        dH[:, : self.p] = np.asarray(self.G @ (X * (fam.b3(eta_hat) / phi)[:, None]))
        direct[: self.p] = omega @ X
        t = self.p
        dgp[:, t] = 2.0 * u_hat / sigma2
        dH[:, t] = -2.0 / sigma2
        direct[t] = np.sum(pi * U**2) / sigma2
        if self.gaussian:
            r = self.p + 1
            dgp[:, r] = -2.0 * self._gsum(y - eta_hat) / phi
            dH[:, r] = -2.0 * self._gsum(b2_hat) / phi
            sq = np.stack([self._gsum((y - e) ** 2) for e in etas], axis=1) / phi
            direct[r] = np.sum(pi * (sq - self.sizes[:, None]))

        du = dgp / H[:, None]
        dlog_s = -0.5 * (dH + Hp[:, None] * du) / H[:, None]
        grad = direct + np.sum(dlog_s + A[:, None] * du + B[:, None] * dlog_s, axis=0)
        grad[t] -= spec.m  # from the -log(sigma_u) normalizing term
        return ll, grad


def _numeric_hessian(obj: LaplaceObjective, theta: np.ndarray) -> np.ndarray:
    """Central differences of the analytic gradient, step 1e-4 * (1 + |theta_k|)."""
    k = theta.size
    H = np.empty((k, k))
    for j in range(k):
        h = 1e-4 * (1.0 + abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        H[:, j] = (obj.evaluate(tp)[1] - obj.evaluate(tm)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def fit_glmm(
    spec: MixedModelSpec,
    nagq: int = 1,
    start: np.ndarray | None = None,
    compute_se: bool = True,
    gtol: float = 1e-7,
    max_iter: int = 1000,
) -> MixedFitResult:
    """Maximum-likelihood fit of a random-intercept GLMM.

    ``compute_se=False`` skips the numeric Hessian (useful when only the
    log-likelihood or AIC is needed).
    """
    if spec.m < 2:
        raise ValidationError("a random intercept needs at least 2 groups; sigma_u is not identifiable")
    obj = LaplaceObjective(spec, nagq)
    p = obj.p
    if start is None:
        glm0 = fit_glm(spec.y, spec.X, spec.family)
        start = np.concatenate([glm0.coefficients, [np.log(0.5)]])
        if obj.gaussian:
            start = np.append(start, 0.5 * np.log(max(glm0.dispersion, 1e-12)))
    theta0 = np.asarray(start, dtype=float)

    history: list[float] = []

    def fun(theta):
        ll, g = obj.evaluate(theta)
        return -ll, -g

    def callback(xk):
        history.append(obj.evaluate(xk, gradient=False)[0])

    bounds = [(None, None)] * p + [LOG_SIGMA_BOUNDS] + ([(None, None)] if obj.gaussian else [])
    res = scipy.optimize.minimize(
        fun, theta0, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15, "maxcor": 20},
    )
    theta = res.x
    ll = obj.evaluate(theta, gradient=False)[0]
    blups = obj.last_modes.copy()
    boundary = bool(theta[p] < LOG_SIGMA_BOUNDARY)

    if compute_se:
        hess = -_numeric_hessian(obj, theta)  # of the negative log-likelihood
        keep = [j for j in range(theta.size) if not (boundary and j == p)]
        try:
            inv = np.linalg.inv(hess[np.ix_(keep, keep)])
        except np.linalg.LinAlgError as exc:
            raise NumericalError("outer Hessian is singular") from exc
        cov = inv[:p, :p]
        cov = 0.5 * (cov + cov.T)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    else:
        cov = np.full((p, p), np.nan)
        se = np.full(p, np.nan)
    obj.evaluate(theta, gradient=False)  # restore modes after Hessian probing
    aic, bic = information_criteria(ll, obj.n_params, spec.n)
    return MixedFitResult(
        family=spec.family.name,
        beta=theta[:p].copy(),
        standard_errors=se,
        covariance=cov,
        sigma_u=0.0 if boundary else float(np.exp(theta[p])),
        residual_sigma=float(np.exp(theta[p + 1])) if obj.gaussian else None,
        blups=blups,
        group_levels=spec.levels,
        loglik=ll,
        aic=aic,
        bic=bic,
        n=spec.n,
        m=spec.m,
        nagq=nagq,
        converged=bool(res.success),
        iterations=int(res.nit),
        boundary=boundary,
        column_names=list(spec.column_names),
        theta=theta,
        loglik_history=history,
    )


def predict(fit: MixedFitResult, X_new: np.ndarray, groups: Sequence | None = None) -> np.ndarray:
    """Conditional predictions ``inverse_link(X beta + u_group)``.

    Groups absent from the fit (or ``groups=None``) get ``u = 0``.
    """
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new[None, :]
    if X_new.shape[1] != fit.beta.size:
        raise ValidationError(f"X_new has {X_new.shape[1]} columns, model has {fit.beta.size}")
    eta = X_new @ fit.beta
    if groups is not None:
        groups = np.asarray(groups)
        lookup = {lvl: u for lvl, u in zip(fit.group_levels.tolist(), fit.blups)}
        eta = eta + np.array([lookup.get(g, 0.0) for g in groups.tolist()])
    return get_family(fit.family).inverse_link(eta)
