"""A small model-formula language: ``y ~ a + b + C(c)``.

``C(name)`` selects the whole block of dummy columns produced for a
categorical variable, i.e. every column called ``name[level]``. An
intercept is always included unless the right-hand side contains ``0`` or
``-1``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ValidationError

_BLOCK = re.compile(r"^C\((?P<name>[^()]+)\)$")


def dummy_name(variable: str, level: object) -> str:
    return f"{variable}[{level}]"


@dataclass(frozen=True)
class Formula:
    response: str
    terms: tuple[str, ...]
    intercept: bool = True

    @classmethod
    def parse(cls, text: str) -> "Formula":
        if text.count("~") != 1:
            raise ValidationError(f"formula must contain exactly one '~': {text!r}")
        lhs, rhs = (s.strip() for s in text.split("~"))
        if not lhs:
            raise ValidationError("formula has no response")
        intercept = True
        rhs = rhs.replace(" ", "")
        if re.search(r"(^|\+)0($|\+)", rhs) or "-1" in rhs:
            intercept = False
            rhs = re.sub(r"(^|\+)0($|\+)", r"\1", rhs).replace("-1", "")
        terms = tuple(t for t in rhs.split("+") if t and t != "1")
        return cls(lhs, terms, intercept)

    def __str__(self) -> str:
        rhs = " + ".join(self.terms) if self.terms else "1"
        return f"{self.response} ~ {rhs}" + ("" if self.intercept else " - 1")

    def columns(self, available: list[str]) -> list[str]:
        """Expand terms to concrete column names, in formula order."""
        out: list[str] = []
        for term in self.terms:
            m = _BLOCK.match(term)
            if m:
                prefix = m.group("name") + "["
                block = [c for c in available if c.startswith(prefix) and c.endswith("]")]
                if not block:
                    raise ValidationError(f"no dummy columns found for {term}")
                out.extend(block)
            elif term in available:
                out.append(term)
            else:
                raise ValidationError(f"unknown variable {term!r} in formula")
        return out

    def design(self, frame: pd.DataFrame) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Return ``(y, X, column_names)`` for ``frame``."""
        cols = list(frame.columns)
        if self.response not in cols:
            raise ValidationError(f"response {self.response!r} not found")
        names = self.columns(cols)
        X = frame[names].to_numpy(dtype=float)
        if self.intercept:
            X = np.column_stack([np.ones(len(frame)), X])
            names = ["(Intercept)"] + names
        return frame[self.response].to_numpy(dtype=float), X, names
