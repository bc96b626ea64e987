"""Multivariate sample moments and provider summaries.

A moment is identified by an exponent tuple ``r = (r_1, ..., r_p)``; its
sample value is ``mean_i prod_j x_ij ** r_j``. Providers export, per
subgroup, the mean and (n-1) variance of every variable plus the raw
moments of the standardized variables for every ``1 <= |r| <= k_max``.
Indices are always listed in graded lexicographic order: by total order,
then descending exponent tuples, so ``(2, 0) < (1, 1) < (0, 2)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement, product
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

FORMAT_VERSION = 1
VARIABLE_KINDS = ("numeric", "binary-dummy")

MultiIndex = tuple[int, ...]


def moment_order(r: Sequence[int]) -> int:
    return int(sum(r))


def enumerate_multi_indices(p: int, k_max: int) -> list[MultiIndex]:
    """All exponent tuples of length ``p`` with ``1 <= |r| <= k_max``.

    The count is ``C(p + k_max, k_max) - 1``.
    """
    if p < 1 or k_max < 1:
        raise ValueError(f"need p >= 1 and k_max >= 1, got p={p}, k_max={k_max}")
    out: list[MultiIndex] = []
    for order in range(1, k_max + 1):
        # multisets of variable positions come out in lex order, which maps
        # to descending lex order on the exponent tuples
        for combo in combinations_with_replacement(range(p), order):
            r = [0] * p
            for j in combo:
                r[j] += 1
            out.append(tuple(r))
    return out


def count_multi_indices(p: int, k_max: int) -> int:
    return math.comb(p + k_max, k_max) - 1


def index_matrix(indices: Sequence[MultiIndex]) -> np.ndarray:
    return np.asarray(indices, dtype=np.int64).reshape(len(indices), -1)


def _check_finite(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise ValidationError("data contains non-finite values")


def power_table(data: np.ndarray, k_max: int) -> np.ndarray:
    """``out[i, j, k] = data[i, j] ** k`` for ``k = 0..k_max`` (with 0**0 = 1)."""
    out = np.empty(data.shape + (k_max + 1,))
    out[..., 0] = 1.0
    for k in range(1, k_max + 1):
        out[..., k] = out[..., k - 1] * data
    return out


def monomials(data: np.ndarray, exponents: np.ndarray, powers: np.ndarray | None = None) -> np.ndarray:
    """Per-row monomials ``prod_j x_ij ** r_j`` as an ``n x len(exponents)`` array."""
    if powers is None:
        powers = power_table(data, int(exponents.max(initial=0)))
    n, p = data.shape
    out = np.ones((n, exponents.shape[0]))
    for j in range(p):
        out *= powers[:, j, :][:, exponents[:, j]]
    return out


def raw_moments(data: np.ndarray, indices: Sequence[MultiIndex] | np.ndarray) -> np.ndarray:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    _check_finite(data)
    exponents = indices if isinstance(indices, np.ndarray) else index_matrix(indices)
    if exponents.shape[1] != data.shape[1]:
        raise ValueError(f"indices have length {exponents.shape[1]}, data has {data.shape[1]} columns")
    return monomials(data, exponents).mean(axis=0)


def raw_moment(data: np.ndarray, r: Sequence[int]) -> float:
    """Sample moment ``(1/n) sum_i prod_j x_ij ** r_j``."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    return float(raw_moments(data, [tuple(r)])[0])


@dataclass
class SubgroupSummary:
    """Moment summary of one block of rows.

    ``std_moments`` maps each multi-index to the raw moment of the
    standardized data ``z = (x - mean) / sqrt(variance)``, in canonical order.
    """

    n: int
    means: np.ndarray
    variances: np.ndarray
    std_moments: dict[MultiIndex, float]

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)

    @property
    def p(self) -> int:
        return len(self.means)

    @property
    def k_max(self) -> int:
        return max(moment_order(r) for r in self.std_moments)

    @property
    def indices(self) -> list[MultiIndex]:
        return list(self.std_moments)

    @property
    def targets(self) -> np.ndarray:
        return np.fromiter(self.std_moments.values(), dtype=float, count=len(self.std_moments))

    @property
    def scales(self) -> np.ndarray:
        return np.sqrt(self.variances)

    def order2_matrix(self) -> np.ndarray:
        """The ``p x p`` block of order-2 standardized moments."""
        p = self.p
        out = np.empty((p, p))
        for a in range(p):
            for b in range(a, p):
                r = [0] * p
                r[a] += 1
                r[b] += 1
                out[a, b] = out[b, a] = self.std_moments[tuple(r)]
        return out


def standardize(data: np.ndarray, names: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(z, means, variances)`` with the n-1 variance convention."""
    means = data.mean(axis=0)
    variances = data.var(axis=0, ddof=1)
    for j, v in enumerate(variances):
        if not v > 0:
            label = names[j] if names is not None else f"column {j}"
            raise ValidationError(f"zero-variance column {label!r}: standardization undefined")
    return (data - means) / np.sqrt(variances), means, variances


def summarize_subgroup(
    data: np.ndarray, k_max: int = 4, names: Sequence[str] | None = None
) -> SubgroupSummary:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n, p = data.shape
    if n < 2:
        raise ValidationError(f"a subgroup needs at least 2 rows, got {n}")
    _check_finite(data)
    z, means, variances = standardize(data, names)
    indices = enumerate_multi_indices(p, k_max)
    values = raw_moments(z, index_matrix(indices))
    return SubgroupSummary(
        n=n,
        means=means,
        variances=variances,
        std_moments={r: float(v) for r, v in zip(indices, values)},
    )


def recover_raw_moments(summary: SubgroupSummary, indices: Sequence[MultiIndex] | None = None) -> np.ndarray:
    """Original-scale raw moments implied by a standardized summary.

    Expands ``x_j = mean_j + s_j z_j`` binomially; every lower-order
    standardized moment needed is part of the summary.
    """
    if indices is None:
        indices = summary.indices
    m, s = summary.means, summary.scales
    lookup = summary.std_moments
    out = np.empty(len(indices))
    for t, r in enumerate(indices):
        total = 0.0
        for a in product(*(range(rj + 1) for rj in r)):
            coef = 1.0
            for rj, aj, mj, sj in zip(r, a, m, s):
                coef *= math.comb(rj, aj) * mj ** (rj - aj) * sj**aj
            total += coef * (lookup[a] if any(a) else 1.0)
        out[t] = total
    return out


def partition_subgroups(n: int, base: int = 250, cap: int = 500) -> list[int]:
    """Subgroup sizes for a group of ``n`` rows.

    Groups of at most ``cap`` rows stay whole; larger ones are cut into
    ``base``-row blocks and the short remainder is folded into the last block.
    """
    if n < 1:
        raise ValueError(f"group size must be positive, got {n}")
    if n <= cap:
        return [n]
    q, rem = divmod(n, base)
    sizes = [base] * q
    i = q - 1
    while rem > 0:
        take = min(rem, cap - sizes[i])
        sizes[i] += take
        rem -= take
        i = (i - 1) % q
    return sizes


def assign_subgroups(sizes: Sequence[int], seed: int | None = None) -> np.ndarray:
    """Subgroup label per row: consecutive blocks, or a seeded shuffle of them."""
    labels = np.repeat(np.arange(len(sizes)), sizes)
    if seed is not None:
        np.random.default_rng(seed).shuffle(labels)
    return labels


@dataclass
class ProviderSummary:
    provider_id: str
    variable_names: list[str]
    variable_kinds: list[str]
    subgroups: list[SubgroupSummary] = field(default_factory=list)
    k_max: int = 4

    @property
    def p(self) -> int:
        return len(self.variable_names)

    @property
    def n_total(self) -> int:
        return sum(sg.n for sg in self.subgroups)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "provider_id": self.provider_id,
            "variables": [{"name": nm, "kind": kd} for nm, kd in zip(self.variable_names, self.variable_kinds)],
            "k_max": self.k_max,
            "n_total": self.n_total,
            "subgroups": [
                {
                    "n": sg.n,
                    "means": [float(v) for v in sg.means],
                    "variances": [float(v) for v in sg.variances],
                    "std_moments": [{"r": list(r), "value": v} for r, v in sg.std_moments.items()],
                }
                for sg in self.subgroups
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProviderSummary":
        try:
            if doc["format_version"] != FORMAT_VERSION:
                raise ValidationError(f"unsupported format_version {doc['format_version']!r}")
            subgroups = [
                SubgroupSummary(
                    n=int(sg["n"]),
                    means=sg["means"],
                    variances=sg["variances"],
                    std_moments={tuple(int(e) for e in item["r"]): float(item["value"]) for item in sg["std_moments"]},
                )
                for sg in doc["subgroups"]
            ]
            return cls(
                provider_id=str(doc["provider_id"]),
                variable_names=[v["name"] for v in doc["variables"]],
                variable_kinds=[v["kind"] for v in doc["variables"]],
                subgroups=subgroups,
                k_max=int(doc["k_max"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed summary document: {exc!r}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ProviderSummary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def summarize_provider(
    data: np.ndarray,
    provider_id: str,
    variable_names: Sequence[str],
    variable_kinds: Sequence[str] | None = None,
    k_max: int = 4,
    base: int = 250,
    cap: int = 500,
    shuffle_seed: int | None = None,
) -> ProviderSummary:
    """Partition one provider's complete-case matrix and summarize each block."""
    data = np.asarray(data, dtype=float)
    sizes = partition_subgroups(data.shape[0], base, cap)
    labels = assign_subgroups(sizes, shuffle_seed)
    subgroups = [summarize_subgroup(data[labels == s], k_max, variable_names) for s in range(len(sizes))]
    if variable_kinds is None:
        variable_kinds = ["numeric"] * len(variable_names)
    return ProviderSummary(
        provider_id=provider_id,
        variable_names=list(variable_names),
        variable_kinds=list(variable_kinds),
        subgroups=subgroups,
        k_max=k_max,
    )
