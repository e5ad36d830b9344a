"""AST for the bounded-SQL dialect: expressions, DNF predicates, bounds.

Predicates are normalized at parse time to a disjunction of conjunctions of
atoms (column <op> literal).  Error bounds keep the numeric value exactly as
written (percent units for relative bounds) so unparse/parse round-trips are
bit-faithful.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import QueryError
from .estimator import AggregateSpec

COMPARE_OPS = ("=", "!=", "<", "<=", ">", ">=")

_NEGATED = {"=": "!=", "!=": "=", "<": ">=", ">=": "<", ">": "<=", "<=": ">"}


# -- scalar expressions -------------------------------------------------------


@dataclass(frozen=True)
class ColumnRef:
    name: str

    def eval(self, columns: dict[str, np.ndarray]) -> np.ndarray:
        try:
            return columns[self.name]
        except KeyError:
            raise QueryError(f"unknown column {self.name!r}") from None

    def unparse(self) -> str:
        return self.name

    def columns(self) -> set[str]:
        return {self.name}


@dataclass(frozen=True)
class NumberLit:
    value: float

    def eval(self, columns) -> float:
        return self.value

    def unparse(self) -> str:
        return _format_number(self.value)

    def columns(self) -> set[str]:
        return set()


@dataclass(frozen=True)
class Arith:
    op: str  # + - * /
    left: "Expr"
    right: "Expr"

    def eval(self, columns):
        a, b = self.left.eval(columns), self.right.eval(columns)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        return a / b

    def unparse(self) -> str:
        return f"({self.left.unparse()} {self.op} {self.right.unparse()})"

    def columns(self) -> set[str]:
        return self.left.columns() | self.right.columns()


Expr = Union[ColumnRef, NumberLit, Arith]


def _format_number(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


# -- predicates ---------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    """One comparison: column <op> literal."""

    column: str
    op: str
    value: float | str

    def __post_init__(self):
        if self.op not in COMPARE_OPS:
            raise QueryError(f"unknown comparison operator {self.op!r}")

    def negated(self) -> "Atom":
        return Atom(self.column, _NEGATED[self.op], self.value)

    def eval(self, columns: dict[str, np.ndarray]) -> np.ndarray:
        try:
            col = columns[self.column]
        except KeyError:
            raise QueryError(f"unknown column {self.column!r}") from None
        if isinstance(self.value, str) != (col.dtype.kind in "US"):
            raise QueryError(
                f"type mismatch comparing column {self.column!r} with {self.value!r}")
        if self.op == "=":
            return col == self.value
        if self.op == "!=":
            return col != self.value
        if self.op == "<":
            return col < self.value
        if self.op == "<=":
            return col <= self.value
        if self.op == ">":
            return col > self.value
        return col >= self.value

    def unparse(self) -> str:
        if isinstance(self.value, str):
            lit = "'" + self.value.replace("'", "''") + "'"
        else:
            lit = _format_number(self.value)
        return f"{self.column} {self.op} {lit}"


Conjunction = tuple[Atom, ...]
Predicate = tuple[Conjunction, ...]  # disjunction of conjunctions; () means true


def eval_conjunction(conj: Conjunction, columns: dict[str, np.ndarray],
                     n: int) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    for atom in conj:
        mask &= atom.eval(columns)
    return mask


def eval_predicate(pred: Predicate, columns: dict[str, np.ndarray],
                   n: int) -> np.ndarray:
    if not pred:
        return np.ones(n, dtype=bool)
    mask = np.zeros(n, dtype=bool)
    for conj in pred:
        mask |= eval_conjunction(conj, columns, n)
    return mask


def negate_conjunction(conj: Conjunction) -> Predicate:
    """De Morgan: NOT (a AND b) = (NOT a) OR (NOT b)."""
    return tuple((atom.negated(),) for atom in conj)


def predicate_columns(pred: Predicate) -> set[str]:
    return {atom.column for conj in pred for atom in conj}


def unparse_predicate(pred: Predicate) -> str:
    parts = [" AND ".join(a.unparse() for a in conj) for conj in pred]
    if len(parts) == 1:
        return parts[0]
    return " OR ".join(f"({p})" for p in parts)


# -- select list and bounds ----------------------------------------------------


@dataclass(frozen=True)
class AggregateItem:
    spec: AggregateSpec

    def unparse(self) -> str:
        op = self.spec.op
        if op == "count":
            return "COUNT(*)"
        if op == "quantile":
            return f"QUANTILE({self.spec.target.unparse()}, {_format_number(self.spec.p)})"
        return f"{op.upper()}({self.spec.target.unparse()})"


@dataclass(frozen=True)
class RelativeErrorItem:
    """RELATIVE ERROR AT c: report the relative half-width at confidence c."""

    confidence: float

    def unparse(self) -> str:
        return f"RELATIVE ERROR AT {_format_number(self.confidence * 100)}"


SelectItem = Union[AggregateItem, RelativeErrorItem]


@dataclass(frozen=True)
class ErrorBound:
    """ERROR WITHIN ...; ``value`` is the number as written (percent units
    when relative), so epsilon = value/100 for relative bounds."""

    value: float
    kind: str  # relative | absolute
    confidence: float = 0.95

    @property
    def epsilon(self) -> float:
        return self.value / 100.0 if self.kind == "relative" else self.value

    def unparse(self) -> str:
        text = f"ERROR WITHIN {_format_number(self.value)}"
        text += "%" if self.kind == "relative" else " ABSOLUTE"
        if self.confidence != 0.95:
            text += f" CONFIDENCE {_format_number(self.confidence * 100)}"
        return text


@dataclass(frozen=True)
class TimeBound:
    seconds: float

    def unparse(self) -> str:
        return f"WITHIN {_format_number(self.seconds)} SECONDS"


Bound = Union[ErrorBound, TimeBound, None]


@dataclass(frozen=True)
class BoundedQuery:
    select: tuple[SelectItem, ...]
    table: str
    predicate: Predicate
    group_by: tuple[str, ...]
    bound: Bound
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def aggregates(self) -> tuple[AggregateSpec, ...]:
        return tuple(i.spec for i in self.select if isinstance(i, AggregateItem))

    def template_columns(self) -> tuple[str, ...]:
        return tuple(sorted(predicate_columns(self.predicate) | set(self.group_by)))

    def unparse(self, include_bound: bool = True) -> str:
        parts = ["SELECT " + ", ".join(i.unparse() for i in self.select),
                 f"FROM {self.table}"]
        if self.predicate:
            parts.append("WHERE " + unparse_predicate(self.predicate))
        if self.group_by:
            parts.append("GROUP BY " + ", ".join(self.group_by))
        if include_bound and self.bound is not None:
            parts.append(self.bound.unparse())
        return " ".join(parts)

    def fingerprint(self) -> str:
        """Canonical hash of everything except the bound clause, so re-running
        with a different bound reuses cached intermediate results."""
        core = self.unparse(include_bound=False)
        return hashlib.sha256(core.encode()).hexdigest()[:16]

    def with_predicate(self, predicate: Predicate) -> "BoundedQuery":
        return BoundedQuery(self.select, self.table, predicate, self.group_by,
                            self.bound, self.warnings)

    def with_bound(self, bound: Bound) -> "BoundedQuery":
        return BoundedQuery(self.select, self.table, self.predicate,
                            self.group_by, bound, self.warnings)
