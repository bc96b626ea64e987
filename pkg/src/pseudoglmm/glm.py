"""Fixed-effects GLM fitting by iteratively reweighted least squares."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .families import FamilySpec, get_family


@dataclass(frozen=True)
class FitResult:
    family: str
    coefficients: np.ndarray
    standard_errors: np.ndarray
    covariance: np.ndarray
    loglik_fitted: float
    aic: float
    bic: float
    deviance: float
    dispersion: float
    converged: bool
    iterations: int
    n: int
    p_model: int
    column_names: list[str] = field(default_factory=list)
    deviance_history: list[float] = field(default_factory=list, repr=False)

    @property
    def n_params(self) -> int:
        return self.p_model + (1 if self.family == "gaussian" else 0)

    def to_dict(self) -> dict:
        from .glmm import wald_ci

        lo, hi = wald_ci(self.coefficients, self.standard_errors)
        return {
            "model": "glm",
            "family": self.family,
            "coefficients": [
                {"name": nm, "estimate": float(b), "se": float(s), "ci_lower": float(a), "ci_upper": float(c)}
                for nm, b, s, a, c in zip(self.column_names, self.coefficients, self.standard_errors, lo, hi)
            ],
            "dispersion": self.dispersion,
            "loglik": self.loglik_fitted,
            "aic": self.aic,
            "bic": self.bic,
            "deviance": self.deviance,
            "n": self.n,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def information_criteria(loglik: float, n_params: int, n: int) -> tuple[float, float]:
    return -2.0 * loglik + 2.0 * n_params, -2.0 * loglik + np.log(n) * n_params


def truncated_aic(fit: FitResult) -> float:
    """AIC from the fitted log-likelihood with response-only terms left out."""
    return information_criteria(fit.loglik_fitted, fit.n_params, fit.n)[0]


def truncated_bic(fit: FitResult) -> float:
    return information_criteria(fit.loglik_fitted, fit.n_params, fit.n)[1]


def _check_design(y: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.size:
        raise ValidationError(f"design has {X.shape[0]} rows but response has {y.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
        raise ValidationError("non-finite values in response or design")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError("design matrix is rank deficient")
    return y, X


def fit_glm(
    y: np.ndarray,
    X: np.ndarray,
    family: str | FamilySpec,
    column_names: list[str] | None = None,
    max_iter: int = 50,
    tol: float = 1e-10,
    max_halvings: int = 10,
) -> FitResult:
    """IRLS with step-halving whenever the deviance goes up."""
    fam = get_family(family)
    y, X = _check_design(y, X)
    n, p = X.shape
    if column_names is None:
        column_names = [f"b{j}" for j in range(p)]

    def deviance(eta: np.ndarray) -> float:
        return float(np.sum(fam.unit_deviance_eta(y, eta)))

    eta = fam.link(fam.mu_init(y))
    beta = None
    dev = np.inf
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = fam.b2(eta)
        mu = fam.inverse_link(eta)
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise NumericalError("IRLS working weights became non-finite or zero")
        z = eta + (y - mu) / w
        sw = np.sqrt(w)
        beta_new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        eta_new = X @ beta_new
        dev_new = deviance(eta_new)
        if beta is not None:
            halvings = 0
            while not (np.isfinite(dev_new) and dev_new <= dev) and halvings < max_halvings:
                beta_new = 0.5 * (beta_new + beta)
                eta_new = X @ beta_new
                dev_new = deviance(eta_new)
                halvings += 1
            if not np.isfinite(dev_new):
                raise NumericalError("IRLS diverged: deviance is not finite")
        elif not np.isfinite(dev_new):
            raise NumericalError("IRLS diverged on the first iteration")
        change = abs(dev_new - dev) / (abs(dev_new) + 0.1)
        beta, eta, dev = beta_new, eta_new, dev_new
        history.append(dev)
        if change < tol:
            converged = True
            break

    w = fam.b2(eta)
    xtwx = X.T @ (X * w[:, None])
    unscaled = np.linalg.inv(xtwx)
    if fam.estimate_dispersion:
        dispersion = dev / (n - p) if n > p else np.nan
        loglik = fam.loglik(y, eta, dev / n)
    else:
        dispersion = 1.0
        loglik = fam.loglik(y, eta)
    cov = dispersion * unscaled
    cov = 0.5 * (cov + cov.T)
    n_params = p + (1 if fam.estimate_dispersion else 0)
    aic, bic = information_criteria(loglik, n_params, n)
    return FitResult(
        family=fam.name,
        coefficients=beta,
        standard_errors=np.sqrt(np.diag(cov)),
        covariance=cov,
        loglik_fitted=loglik,
        aic=aic,
        bic=bic,
        deviance=dev,
        dispersion=dispersion,
        converged=converged,
        iterations=it,
        n=n,
        p_model=p,
        column_names=list(column_names),
        deviance_history=history,
    )
