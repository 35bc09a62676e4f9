"""Minimal regression-formula grammar.

Supported syntax::

    y ~ a + b + a*c + b:c - 1

``a*c`` expands to ``a + c + a:c``; ``a:c`` is the elementwise product of the
two columns; the intercept is implicit and removed by ``- 1`` or ``+ 0``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

_NAME = re.compile(r"^[A-Za-z_.][A-Za-z0-9_.]*$")


class FormulaError(ValueError):
    """Raised when a formula string cannot be parsed or resolved."""


@dataclass(frozen=True)
class Formula:
    outcome: str | None
    terms: tuple[str, ...]
    intercept: bool = True
    raw: str = field(default="", compare=False)

    @property
    def variables(self) -> list[str]:
        """Distinct column names referenced on the right-hand side, in order."""
        seen: list[str] = []
        for term in self.terms:
            for name in term.split(":"):
                if name not in seen:
                    seen.append(name)
        return seen

    @property
    def column_names(self) -> list[str]:
        return (["(Intercept)"] if self.intercept else []) + list(self.terms)

    def design_matrix(self, data: pd.DataFrame | dict) -> np.ndarray:
        """Build the design matrix ``X`` for this formula from a column store."""
        n = _n_rows(data)
        cols = []
        if self.intercept:
            cols.append(np.ones(n))
        for term in self.terms:
            prod = np.ones(n)
            for name in term.split(":"):
                if name not in data:
                    raise FormulaError(f"column {name!r} referenced by formula is missing")
                prod = prod * np.asarray(data[name], dtype=float)
            cols.append(prod)
        if not cols:
            return np.empty((n, 0))
        return np.column_stack(cols)

    def with_terms(self, extra: list[str], outcome: str | None = None) -> "Formula":
        terms = list(self.terms) + [t for t in extra if t not in self.terms]
        return Formula(outcome if outcome is not None else self.outcome, tuple(terms), self.intercept)

    def __str__(self) -> str:
        rhs = " + ".join(self.terms) if self.terms else "1"
        if not self.intercept:
            rhs += " - 1"
        return f"{self.outcome} ~ {rhs}" if self.outcome else f"~ {rhs}"


def _n_rows(data) -> int:
    if isinstance(data, pd.DataFrame):
        return len(data)
    first = next(iter(data.values()))
    return len(np.asarray(first))


def _check_name(name: str, formula: str) -> str:
    if not _NAME.match(name):
        raise FormulaError(f"invalid variable name {name!r} in formula {formula!r}")
    return name


def parse_formula(text: str) -> Formula:
    """Parse ``text`` into a :class:`Formula`.

    >>> parse_formula("A ~ W1 + W3 * W4").terms
    ('W1', 'W3', 'W4', 'W3:W4')
    """
    if "~" not in text:
        raise FormulaError(f"formula {text!r} has no '~'")
    lhs, rhs = text.split("~", 1)
    lhs = lhs.strip()
    outcome = _check_name(lhs, text) if lhs else None

    if re.search(r"[+\-*:]\s*$|^\s*[+*:]|[+\-*:]\s*[+*:]", rhs):
        raise FormulaError(f"dangling operator in formula {text!r}")
    intercept = True
    terms: list[str] = []
    # split on +/- keeping the sign
    for sign, chunk in re.findall(r"([+-]?)\s*([^+-]+)", rhs):
        chunk = chunk.strip()
        if not chunk:
            continue
        if chunk in ("0", "1"):
            if sign == "-" and chunk == "1" or chunk == "0":
                intercept = False
            continue
        if sign == "-":
            raise FormulaError(f"term removal is only supported for the intercept: {text!r}")
        if "*" in chunk:
            names = [_check_name(p.strip(), text) for p in chunk.split("*")]
            expanded = list(names)
            for i in range(len(names)):
                for j in range(i + 1, len(names)):
                    expanded.append(f"{names[i]}:{names[j]}")
            if len(names) > 2:
                expanded.append(":".join(names))
        else:
            expanded = [":".join(_check_name(p.strip(), text) for p in chunk.split(":"))]
        for term in expanded:
            if term not in terms:
                terms.append(term)
    return Formula(outcome, tuple(terms), intercept, raw=text)


def default_formula(outcome: str | None, predictors: list[str]) -> Formula:
    return Formula(outcome, tuple(predictors), True)


def as_formula(spec: str | Formula | None, outcome: str | None, predictors: list[str]) -> Formula:
    """Resolve an optional user formula, defaulting to main terms in ``predictors``."""
    if spec is None:
        return default_formula(outcome, predictors)
    if isinstance(spec, Formula):
        return spec
    return parse_formula(spec)
