"""Exponential-family definitions with canonical links.

``soft_binomial`` and ``soft_poisson`` accept any real response: there is
no validity check on ``y``, the saturated log-likelihood is left out of the
deviance, and the response-only terms ``log C(1, y)`` and ``log y!`` are
left out of the log-likelihood (and therefore the AIC). None of these
omissions depend on the parameters, so maximum-likelihood estimates are
unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, gammaln, log1p, logit

MU_EPS = 1e-12
_LOG_2PI = np.log(2 * np.pi)

Array = np.ndarray


def _softplus(eta: Array) -> Array:
    return np.logaddexp(0.0, eta)


@dataclass(frozen=True)
class FamilySpec:
    """One family, parameterized through the cumulant function ``b``.

    With a canonical link, ``mu = b'(eta)`` and ``V(mu) = b''(eta)``;
    ``b3`` is the third derivative, needed for Laplace gradients.
    """

    name: str
    link: Callable[[Array], Array]
    inverse_link: Callable[[Array], Array]
    variance: Callable[[Array], Array]
    cumulant: Callable[[Array], Array]
    b2: Callable[[Array], Array]
    b3: Callable[[Array], Array]
    mu_init: Callable[[Array], Array]
    estimate_dispersion: bool
    truncated: bool  # response-only terms left out of loglik/AIC

    def unit_loglik(self, y: Array, eta: Array, dispersion: float = 1.0) -> Array:
        """Per-observation log-likelihood contributions (truncated for soft families)."""
        if self.estimate_dispersion:
            return -0.5 * ((y - eta) ** 2 / dispersion + _LOG_2PI + np.log(dispersion))
        return y * eta - self.cumulant(eta)

    def loglik(self, y: Array, eta: Array, dispersion: float = 1.0) -> float:
        return float(np.sum(self.unit_loglik(y, eta, dispersion)))

    def unit_deviance_eta(self, y: Array, eta: Array) -> Array:
        """Deviance contributions from the linear predictor (no clamping needed)."""
        if self.estimate_dispersion:
            return (y - eta) ** 2
        return -2.0 * (y * eta - self.cumulant(eta))

    def dropped_terms(self, y: Array) -> float:
        """Sum of the response-only log terms a soft family leaves out.

        Only meaningful when ``y`` satisfies the classical constraints.
        """
        y = np.asarray(y, dtype=float)
        if self.name == "soft_poisson":
            return float(-np.sum(gammaln(y + 1.0)))
        return 0.0


def _binomial_mu_init(y: Array) -> Array:
    # (y w + 0.5) / (w + 1) with unit weights, kept away from 0 and 1
    return np.clip((np.asarray(y, dtype=float) + 0.5) / 2.0, 1e-3, 1 - 1e-3)


def _poisson_mu_init(y: Array) -> Array:
    return np.maximum(np.asarray(y, dtype=float), 0.1)


def _logistic_b2(eta: Array) -> Array:
    mu = expit(eta)
    return mu * (1.0 - mu)


def _logistic_b3(eta: Array) -> Array:
    mu = expit(eta)
    return mu * (1.0 - mu) * (1.0 - 2.0 * mu)


GAUSSIAN = FamilySpec(
    name="gaussian",
    link=lambda mu: mu,
    inverse_link=lambda eta: eta,
    variance=lambda mu: np.ones_like(mu),
    cumulant=lambda eta: 0.5 * eta**2,
    b2=lambda eta: np.ones_like(eta),
    b3=lambda eta: np.zeros_like(eta),
    mu_init=lambda y: np.asarray(y, dtype=float),
    estimate_dispersion=True,
    truncated=False,
)

SOFT_BINOMIAL = FamilySpec(
    name="soft_binomial",
    link=logit,
    inverse_link=expit,
    variance=lambda mu: mu * (1.0 - mu),
    cumulant=_softplus,
    b2=_logistic_b2,
    b3=_logistic_b3,
    mu_init=_binomial_mu_init,
    estimate_dispersion=False,
    truncated=True,
)

SOFT_POISSON = FamilySpec(
    name="soft_poisson",
    link=np.log,
    inverse_link=np.exp,
    variance=lambda mu: mu,
    cumulant=np.exp,
    b2=np.exp,
    b3=np.exp,
    mu_init=_poisson_mu_init,
    estimate_dispersion=False,
    truncated=True,
)

FAMILIES = {f.name: f for f in (GAUSSIAN, SOFT_BINOMIAL, SOFT_POISSON)}


def get_family(name: str | FamilySpec) -> FamilySpec:
    if isinstance(name, FamilySpec):
        return name
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None


def deviance_contribution(family: str | FamilySpec, y: float | Array, mu: float | Array) -> float | Array:
    """Deviance contribution of one or more observations at fitted mean ``mu``.

    Soft families use ``-2 * loglik_fitted`` (no saturated term); the gaussian
    family returns the squared residual.
    """
    family = get_family(family)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if family.name == "gaussian":
        out = (y - mu) ** 2
    elif family.name == "soft_binomial":
        clipped = np.clip(mu, MU_EPS, 1 - MU_EPS)
        if np.any(clipped != mu):
            warnings.warn("fitted probabilities clamped to [1e-12, 1 - 1e-12]", RuntimeWarning, stacklevel=2)
        out = -2.0 * (y * np.log(clipped) + (1.0 - y) * log1p(-clipped))
    else:
        if np.any(mu <= 0):
            raise ValueError("soft_poisson fitted means must be positive")
        out = -2.0 * (y * np.log(mu) - mu)
    return float(out) if out.ndim == 0 else out
