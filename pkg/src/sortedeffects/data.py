"""Samples, design matrices and the weighted empirical measure.

A :class:`Sample` is immutable once built and can be shared freely between
bootstrap workers. Design matrices are produced from a :class:`DesignSpec`,
an ordered list of product terms over the covariate columns; the treatment
column can be overridden to evaluate counterfactual rows ``P(t, W_i)``.
"""

from __future__ import annotations

import csv
import logging
import math
import operator
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptySampleError, NumericalError, ParseError, SchemaError

log = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


@dataclass(frozen=True, eq=False)
class Sample:
    """Observations used by the estimators and by the estimated measure.

    ``x`` holds the covariates column-wise with names in ``columns``; ``w``
    are frequency-style sampling weights and ``s`` flags the subpopulation
    over which effects are sorted.
    """

    y: np.ndarray
    x: np.ndarray
    w: np.ndarray | None = None
    s: np.ndarray | None = None
    columns: tuple[str, ...] = ()
    outcome: str = "y"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = y.shape[0]
        if x.shape[0] != n:
            raise SchemaError(f"x has {x.shape[0]} rows but y has {n}")
        w = np.ones(n) if self.w is None else np.asarray(self.w, dtype=float).reshape(-1)
        s = np.ones(n, dtype=bool) if self.s is None else np.asarray(self.s, dtype=bool).reshape(-1)
        if w.shape[0] != n or s.shape[0] != n:
            raise SchemaError("weights and subpopulation flags must have one entry per observation")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise ParseError("sample contains non-finite values")
        if np.any(w < 0):
            raise ParseError("sampling weights must be nonnegative")
        if n == 0:
            raise EmptySampleError("sample has no usable rows")
        if not w[s].sum() > 0:
            raise EmptySampleError("selected subpopulation has zero total weight")
        columns = tuple(self.columns) or tuple(f"x{j}" for j in range(x.shape[1]))
        if len(columns) != x.shape[1]:
            raise SchemaError(f"{len(columns)} column names for {x.shape[1]} covariates")
        for name, arr in (("y", y), ("x", x), ("w", w), ("s", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "columns", columns)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate column {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        """Covariate column by name; the outcome is reachable by its own name."""
        if name == self.outcome and name not in self.columns:
            return self.y
        return self.x[:, self.index(name)]

    def with_subpopulation(self, s) -> "Sample":
        return Sample(self.y, self.x, self.w, s, self.columns, self.outcome)


@dataclass(frozen=True)
class Factor:
    """One multiplicand of a design term: ``x_j ** power`` or ``(1 - x_j)``."""

    column: int
    power: int = 1
    complement: bool = False

    def __post_init__(self):
        if self.complement and self.power != 1:
            raise ConfigError("complement factors must have power 1")
        if self.power < 1:
            raise ConfigError("factor powers must be positive integers")

    def value(self, v: np.ndarray) -> np.ndarray:
        if self.complement:
            return 1.0 - v
        return v**self.power

    def derivative(self, v: np.ndarray) -> np.ndarray:
        if self.complement:
            return -np.ones_like(v)
        if self.power == 1:
            return np.ones_like(v)
        return self.power * v ** (self.power - 1)


@dataclass(frozen=True)
class Term:
    """Product of factors; the empty product is the constant term."""

    factors: tuple[Factor, ...] = ()
    label: str = ""

    def __mul__(self, other: "Term") -> "Term":
        label = "*".join(p for p in (self.label, other.label) if p and p != "1") or "1"
        return Term(self.factors + other.factors, label)


def constant() -> Term:
    return Term((), "1")


def raw(column: int, name: str | None = None) -> Term:
    return Term((Factor(column),), name or f"x{column}")


def power(column: int, p: int, name: str | None = None) -> Term:
    base = name or f"x{column}"
    return Term((Factor(column, p),), base if p == 1 else f"{base}^{p}")


def complement(column: int, name: str | None = None) -> Term:
    return Term((Factor(column, complement=True),), f"(1-{name or f'x{column}'})")


def polynomial(column: int, degree: int, name: str | None = None) -> list[Term]:
    """Powers 1..degree of one column."""
    return [power(column, p, name) for p in range(1, degree + 1)]


def interact(left: Sequence[Term], right: Sequence[Term]) -> list[Term]:
    """All pairwise products, left operand major: (l1 r1, l1 r2, ..., l2 r1, ...)."""
    return [a * b for a in left for b in right]


_FACTOR_RE = re.compile(r"^\(\s*1\s*-\s*(?P<comp>[^()*^\s]+)\s*\)$|^(?P<name>[^()*^\s]+)(\s*\^\s*(?P<pow>\d+))?$")


def parse_term(text: str, columns: Sequence[str]) -> Term:
    """Parse ``"1"``, ``"exp"``, ``"exp^2"``, ``"t*exp"`` or ``"(1-t)*exp^3"``."""
    text = text.strip()
    if text == "1":
        return constant()
    term = constant()
    for piece in text.split("*"):
        m = _FACTOR_RE.match(piece.strip())
        if m is None:
            raise ConfigError(f"cannot parse design term {text!r}")
        name = m.group("comp") or m.group("name")
        if name not in columns:
            raise ConfigError(f"design term {text!r} references unknown column {name!r}")
        j = list(columns).index(name)
        if m.group("comp"):
            term = term * complement(j, name)
        else:
            term = term * power(j, int(m.group("pow") or 1), name)
    return term


@dataclass(frozen=True)
class DesignSpec:
    """Ordered design terms, the treatment column and an optional rank grid."""

    terms: tuple[Term, ...]
    treatment: int
    rank_grid: tuple[float, ...] | None = None
    labels: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ConfigError("design needs at least one term")
        if self.rank_grid is not None:
            g = np.asarray(self.rank_grid, dtype=float)
            if g.ndim != 1 or g.size == 0:
                raise ConfigError("rank grid must be a nonempty list")
            if not (np.all(g > 0) and np.all(g < 1)):
                raise ConfigError("rank grid must lie strictly inside (0, 1)")
            if np.any(np.diff(g) <= 0):
                raise ConfigError("rank grid must be strictly increasing")
            object.__setattr__(self, "rank_grid", tuple(float(v) for v in g))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(t.label for t in self.terms))

    @property
    def d_p(self) -> int:
        return len(self.terms)

    @property
    def uses_treatment(self) -> bool:
        return any(f.column == self.treatment for t in self.terms for f in t.factors)

    def validate(self, d_x: int) -> None:
        if not 0 <= self.treatment < d_x:
            raise ConfigError(f"treatment column {self.treatment} out of range for {d_x} covariates")
        for t in self.terms:
            for f in t.factors:
                if not 0 <= f.column < d_x:
                    raise ConfigError(f"term {t.label!r} references column {f.column} (only {d_x} covariates)")


def _covariates(sample_or_x) -> np.ndarray:
    if isinstance(sample_or_x, Sample):
        return sample_or_x.x
    x = np.asarray(sample_or_x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def build_design(sample, spec: DesignSpec, t_value: float | None = None) -> np.ndarray:
    """Evaluate ``P(t_value, W_i)`` row-wise (observed T when ``t_value`` is None).

    Columns follow ``spec.terms`` order exactly.
    """
    x = _covariates(sample)
    spec.validate(x.shape[1])
    if t_value is not None:
        x = x.copy()
        x[:, spec.treatment] = t_value
    out = np.ones((x.shape[0], spec.d_p))
    with np.errstate(over="ignore", invalid="ignore"):
        for k, term in enumerate(spec.terms):
            for f in term.factors:
                out[:, k] *= f.value(x[:, f.column])
    if not np.all(np.isfinite(out)):
        bad = sorted({spec.labels[k] for k in np.where(~np.isfinite(out))[1]})
        raise NumericalError(f"non-finite values in design columns {bad}")
    return out


def build_design_derivative(sample, spec: DesignSpec, t_value: float | None = None) -> np.ndarray:
    """Analytic derivative of ``P(t, W_i)`` with respect to the treatment column."""
    x = _covariates(sample)
    spec.validate(x.shape[1])
    if t_value is not None:
        x = x.copy()
        x[:, spec.treatment] = t_value
    out = np.zeros((x.shape[0], spec.d_p))
    with np.errstate(over="ignore", invalid="ignore"):
        for k, term in enumerate(spec.terms):
            # product rule over the factors touching the treatment column
            for i, fi in enumerate(term.factors):
                if fi.column != spec.treatment:
                    continue
                part = fi.derivative(x[:, fi.column])
                for j, fj in enumerate(term.factors):
                    if j != i:
                        part = part * fj.value(x[:, fj.column])
                out[:, k] += part
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite values in design derivative")
    return out


def weighted_measure(sample: Sample, extra_weights: np.ndarray | None = None) -> np.ndarray:
    """Normalized weights ``p_i = w_i 1{s_i} / sum_{j: s_j} w_j``.

    ``extra_weights`` multiplies the sampling weights first (bootstrap draws).
    """
    w = sample.w if extra_weights is None else sample.w * np.asarray(extra_weights, dtype=float)
    mass = np.where(sample.s, w, 0.0)
    total = mass.sum()
    if not total > 0:
        raise EmptySampleError("subpopulation has zero total weight")
    return mass / total


# -- CSV loading ---------------------------------------------------------------

_OPS = {"==": operator.eq, "!=": operator.ne, "<=": operator.le, ">=": operator.ge, "<": operator.lt, ">": operator.gt}
_COND_RE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(==|!=|<=|>=|<|>)\s*([-+0-9.eE]+)\s*$")


def parse_predicate(text: str) -> list[tuple[str, str, float]]:
    """Parse a conjunction such as ``"female == 1 and married == 1"``."""
    conds = []
    for part in re.split(r"\s+and\s+|&", text.strip()):
        m = _COND_RE.match(part)
        if m is None:
            raise ConfigError(f"cannot parse subpopulation condition {part!r}")
        conds.append((m.group(1), m.group(2), float(m.group(3))))
    return conds


def predicate_columns(text: str | None) -> list[str]:
    return [] if not text else [c for c, _, _ in parse_predicate(text)]


def evaluate_predicate(text: str, lookup) -> np.ndarray:
    """Evaluate a parsed conjunction; ``lookup(name)`` returns a column."""
    mask = None
    for name, op, value in parse_predicate(text):
        m = _OPS[op](np.asarray(lookup(name)), value)
        mask = m if mask is None else (mask & m)
    return mask


@dataclass(frozen=True)
class Schema:
    """Column roles for :func:`load_csv`."""

    outcome: str
    covariates: tuple[str, ...]
    weight: str | None = None
    subpopulation: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))


def _to_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"non-numeric value {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {cell!r} at row {row}, column {col!r}")
    return v


def load_csv(path, schema: Schema) -> Sample:
    """Read a header-row CSV into a :class:`Sample`.

    Rows with a missing value in any used column are dropped (no imputation).
    Weights default to one when the schema names no weight column.
    """
    path = Path(path)
    used = [schema.outcome, *schema.covariates]
    if schema.weight:
        used.append(schema.weight)
    for c in predicate_columns(schema.subpopulation):
        if c not in used:
            used.append(c)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptySampleError(f"{path} is empty") from None
        for c in used:
            if c not in header:
                raise SchemaError(f"column {c!r} not found in {path}")
        pos = [header.index(c) for c in used]
        rows, dropped = [], 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not v.strip() for v in rec):
                continue
            cells = [rec[p].strip() if p < len(rec) else "" for p in pos]
            if any(v.lower() in MISSING_TOKENS for v in cells):
                dropped += 1
                continue
            rows.append([_to_float(v, lineno, c) for v, c in zip(cells, used)])
    if dropped:
        log.info("dropped %d rows with missing values from %s", dropped, path)
    if not rows:
        raise EmptySampleError(f"no usable rows in {path}")
    data = np.array(rows, dtype=float)
    cols = {c: data[:, k] for k, c in enumerate(used)}
    y = cols[schema.outcome]
    x = np.column_stack([cols[c] for c in schema.covariates]) if schema.covariates else np.empty((len(rows), 0))
    w = cols[schema.weight] if schema.weight else None
    s = evaluate_predicate(schema.subpopulation, cols.__getitem__) if schema.subpopulation else None
    return Sample(y, x, w, s, schema.covariates, schema.outcome)
