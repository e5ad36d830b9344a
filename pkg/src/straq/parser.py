"""Recursive-descent parser for the bounded-SQL dialect.

Grammar (EBNF; keywords case-insensitive):

    query      = "SELECT" item {"," item} "FROM" ident
                 ["WHERE" pred] ["GROUP" "BY" ident {"," ident}] [bound]
    item       = "COUNT" "(" "*" ")"
               | ("SUM"|"AVG"|"MEAN"|"MEDIAN") "(" expr ")"
               | "QUANTILE" "(" expr "," number ")"
               | "RELATIVE" "ERROR" "AT" number
    expr       = term {("+"|"-") term}
    term       = factor {("*"|"/") factor}
    factor     = number | ident | "(" expr ")" | "-" factor
    pred       = conj {"OR" conj}
    conj       = unit {"AND" unit}
    unit       = "NOT" unit | "(" pred ")" | atom
    atom       = ident ("="|"!="|"<>"|"<"|"<="|">"|">=") literal
    literal    = ["-"] number | string
    bound      = "ERROR" "WITHIN" number ["%" | "ABSOLUTE"]
                 ["CONFIDENCE" number]
               | "WITHIN" number "SECONDS"

Predicates are normalized to DNF during parsing (NOT is pushed down to
comparison flips).  A bare ``ERROR WITHIN x`` carries no unit; it defaults to
a relative percent bound with a warning, and ``ABSOLUTE`` marks absolute
bounds explicitly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ParseError
from .estimator import AggregateSpec
from .query_ast import (
    AggregateItem,
    Arith,
    Atom,
    BoundedQuery,
    ColumnRef,
    ErrorBound,
    NumberLit,
    RelativeErrorItem,
    TimeBound,
)

MAX_DISJUNCTS = 64

KEYWORDS = {
    "SELECT", "FROM", "WHERE", "GROUP", "BY", "AND", "OR", "NOT",
    "ERROR", "WITHIN", "SECONDS", "CONFIDENCE", "RELATIVE", "AT", "ABSOLUTE",
    "COUNT", "SUM", "AVG", "MEAN", "MEDIAN", "QUANTILE",
}

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)
  | (?P<string>'(?:[^']|'')*')
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|!=|<>|=|<|>|\(|\)|,|\*|%|\+|-|/)
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # number | string | ident | keyword | op | end
    text: str
    pos: int


def tokenize(text: str) -> list[Token]:
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        value = m.group()
        if kind != "ws":
            if kind == "ident" and value.upper() in KEYWORDS:
                tokens.append(Token("keyword", value.upper(), pos))
            else:
                tokens.append(Token(kind, value, pos))
        pos = m.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


# internal predicate tree, flattened to DNF after parsing
class _Not:
    def __init__(self, child):
        self.child = child


class _And:
    def __init__(self, parts):
        self.parts = parts


class _Or:
    def __init__(self, parts):
        self.parts = parts


def _to_dnf(node, pos: int):
    if isinstance(node, Atom):
        return ((node,),)
    if isinstance(node, _Not):
        child = node.child
        if isinstance(child, Atom):
            return ((child.negated(),),)
        if isinstance(child, _Not):
            return _to_dnf(child.child, pos)
        if isinstance(child, _And):
            return _to_dnf(_Or([_Not(p) for p in child.parts]), pos)
        return _to_dnf(_And([_Not(p) for p in child.parts]), pos)
    if isinstance(node, _Or):
        out = []
        for part in node.parts:
            out.extend(_to_dnf(part, pos))
        if len(out) > MAX_DISJUNCTS:
            raise ParseError(f"predicate expands past {MAX_DISJUNCTS} disjuncts", pos)
        return tuple(out)
    # AND: distribute over the disjunctions of its parts
    result = ((),)
    for part in node.parts:
        part_dnf = _to_dnf(part, pos)
        result = tuple(c1 + c2 for c1 in result for c2 in part_dnf)
        if len(result) > MAX_DISJUNCTS:
            raise ParseError(f"predicate expands past {MAX_DISJUNCTS} disjuncts", pos)
    return result


class _Parser:
    def __init__(self, text: str, default_confidence: float = 0.95):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0
        self.default_confidence = default_confidence
        self.warnings: list[str] = []

    @property
    def cur(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        tok = self.cur
        self.i += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> Token:
        tok = self.cur
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text or kind
            raise ParseError(f"expected {want}, found {tok.text or 'end of input'}",
                             tok.pos)
        return self.advance()

    def accept(self, kind: str, text: str | None = None) -> Token | None:
        tok = self.cur
        if tok.kind == kind and (text is None or tok.text == text):
            return self.advance()
        return None

    # -- grammar --------------------------------------------------------

    def query(self) -> BoundedQuery:
        self.expect("keyword", "SELECT")
        select = [self.select_item()]
        while self.accept("op", ","):
            select.append(self.select_item())
        self.expect("keyword", "FROM")
        table = self.expect("ident").text
        predicate: tuple = ()
        if self.accept("keyword", "WHERE"):
            tree = self.pred()
            predicate = _to_dnf(tree, self.cur.pos)
        group_by: list[str] = []
        if self.accept("keyword", "GROUP"):
            self.expect("keyword", "BY")
            group_by.append(self.expect("ident").text)
            while self.accept("op", ","):
                group_by.append(self.expect("ident").text)
        bound = self.bound()
        if self.cur.kind == "keyword" and self.cur.text in ("ERROR", "WITHIN"):
            raise ParseError("at most one bound clause is allowed", self.cur.pos)
        if self.cur.kind != "end":
            raise ParseError(f"unexpected {self.cur.text!r} after query",
                             self.cur.pos)
        return BoundedQuery(tuple(select), table, predicate, tuple(group_by),
                            bound, tuple(self.warnings))

    def select_item(self):
        tok = self.cur
        if tok.kind == "keyword" and tok.text == "RELATIVE":
            self.advance()
            self.expect("keyword", "ERROR")
            self.expect("keyword", "AT")
            conf = self.number()
            return RelativeErrorItem(confidence=conf / 100.0)
        if tok.kind == "keyword" and tok.text in ("COUNT", "SUM", "AVG", "MEAN",
                                                  "MEDIAN", "QUANTILE"):
            name = self.advance().text
            self.expect("op", "(")
            if name == "COUNT":
                self.expect("op", "*")
                self.expect("op", ")")
                return AggregateItem(AggregateSpec("count"))
            expr = self.expr()
            if name == "QUANTILE":
                self.expect("op", ",")
                p = self.number()
                self.expect("op", ")")
                return AggregateItem(AggregateSpec("quantile", expr, p))
            self.expect("op", ")")
            if name == "MEDIAN":
                return AggregateItem(AggregateSpec("quantile", expr, 0.5))
            op = "avg" if name in ("AVG", "MEAN") else name.lower()
            return AggregateItem(AggregateSpec(op, expr))
        raise ParseError(f"unknown aggregate {tok.text!r}", tok.pos)

    def number(self) -> float:
        tok = self.expect("number")
        return float(tok.text)

    def expr(self):
        node = self.term()
        while True:
            tok = self.accept("op", "+") or self.accept("op", "-")
            if tok is None:
                return node
            node = Arith(tok.text, node, self.term())

    def term(self):
        node = self.factor()
        while True:
            tok = self.accept("op", "*") or self.accept("op", "/")
            if tok is None:
                return node
            node = Arith(tok.text, node, self.factor())

    def factor(self):
        if self.accept("op", "-"):
            return Arith("-", NumberLit(0.0), self.factor())
        if self.accept("op", "("):
            node = self.expr()
            self.expect("op", ")")
            return node
        tok = self.cur
        if tok.kind == "number":
            self.advance()
            return NumberLit(float(tok.text))
        if tok.kind == "ident":
            self.advance()
            return ColumnRef(tok.text)
        raise ParseError(f"expected expression, found {tok.text!r}", tok.pos)

    def pred(self):
        parts = [self.conj()]
        while self.accept("keyword", "OR"):
            parts.append(self.conj())
        return parts[0] if len(parts) == 1 else _Or(parts)

    def conj(self):
        parts = [self.pred_unit()]
        while self.accept("keyword", "AND"):
            parts.append(self.pred_unit())
        return parts[0] if len(parts) == 1 else _And(parts)

    def pred_unit(self):
        if self.accept("keyword", "NOT"):
            return _Not(self.pred_unit())
        if self.accept("op", "("):
            node = self.pred()
            self.expect("op", ")")
            return node
        return self.atom()

    def atom(self) -> Atom:
        col = self.expect("ident").text
        tok = self.cur
        if tok.kind != "op" or tok.text not in ("=", "!=", "<>", "<", "<=", ">", ">="):
            raise ParseError(f"expected comparison operator, found {tok.text!r}",
                             tok.pos)
        self.advance()
        op = "!=" if tok.text == "<>" else tok.text
        return Atom(col, op, self.literal())

    def literal(self):
        if self.accept("op", "-"):
            return -self.number()
        tok = self.cur
        if tok.kind == "number":
            self.advance()
            return float(tok.text)
        if tok.kind == "string":
            self.advance()
            return tok.text[1:-1].replace("''", "'")
        raise ParseError(f"expected literal, found {tok.text!r}", tok.pos)

    def bound(self):
        tok = self.cur
        if tok.kind == "keyword" and tok.text == "ERROR":
            self.advance()
            self.expect("keyword", "WITHIN")
            value = self.number()
            if self.accept("op", "%"):
                kind = "relative"
            elif self.accept("keyword", "ABSOLUTE"):
                kind = "absolute"
            else:
                kind = "relative"
                self.warnings.append(
                    f"bare error bound {value:g} interpreted as relative percent")
            confidence = self.default_confidence
            if self.accept("keyword", "CONFIDENCE"):
                confidence = self.number() / 100.0
            return ErrorBound(value, kind, confidence)
        if tok.kind == "keyword" and tok.text == "WITHIN":
            self.advance()
            seconds = self.number()
            self.expect("keyword", "SECONDS")
            return TimeBound(seconds)
        return None


def parse(text: str, default_confidence: float = 0.95) -> BoundedQuery:
    """Parse one bounded-SQL query into its normalized AST."""
    return _Parser(text, default_confidence).query()
