"""Query orchestration: parse, route through sample selection and profiling,
estimate, and format results with error bars."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .catalog import Catalog
from .errors import MissingSubgroupError, QueryError
from .estimator import GroupEstimate, StratumSummary, estimate
from .query_ast import (
    AggregateItem,
    BoundedQuery,
    ErrorBound,
    RelativeErrorItem,
    TimeBound,
)
from .runtime import (
    ErrorLatencyProfile,
    ExecutionResult,
    ReuseCache,
    TableScan,
    build_error_profile,
    build_latency_profile,
    execute_with_reuse,
    finalize_estimates,
    readable_for,
    rewrite_disjunction,
    select_family,
    sorted_group_keys,
)
from . import parser


@dataclass
class ResultRow:
    group: tuple
    aggregate: str
    estimate: GroupEstimate
    relative_errors: tuple[tuple[float, float], ...] = ()  # (confidence, value)


@dataclass
class QueryResult:
    query: BoundedQuery
    rows: list[ResultRow]
    sample_id: str
    profile: ErrorLatencyProfile | None = None
    warnings: tuple[str, ...] = ()

    def format(self, tsv: bool = False) -> str:
        group_cols = list(self.query.group_by)
        rel_items = [i for i in self.query.select if isinstance(i, RelativeErrorItem)]
        header = group_cols + ["aggregate", "estimate", "+-", "confidence",
                               "n", "sample", "flags"]
        header += [f"relerr@{int(round(i.confidence * 100))}" for i in rel_items]
        table = [header]
        for row in self.rows:
            e = row.estimate
            cells = [_fmt_value(v) for v in row.group]
            cells += [row.aggregate, _fmt_value(e.estimate), _fmt_value(e.half_width),
                      _fmt_value(e.confidence), str(e.n), e.sample_id,
                      ",".join(e.flags) if e.flags else "-"]
            cells += [_fmt_value(v) for _, v in row.relative_errors]
            table.append(cells)
        if tsv:
            return "\n".join("\t".join(r) for r in table)
        widths = [max(len(r[i]) for r in table) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
                 for r in table]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _fmt_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def validate_query(query: BoundedQuery, catalog: Catalog) -> None:
    if query.table not in catalog.tables:
        raise QueryError(f"unknown table {query.table!r}")
    schema = catalog.tables[query.table].schema
    for col in query.group_by:
        if col not in schema.names:
            raise QueryError(f"unknown column {col!r} in GROUP BY")
    for conj in query.predicate:
        for atom in conj:
            if atom.column not in schema.names:
                raise QueryError(f"unknown column {atom.column!r} in WHERE")
            is_str = schema.type_of(atom.column) == "string"
            if is_str != isinstance(atom.value, str):
                raise QueryError(
                    f"type mismatch: column {atom.column!r} is "
                    f"{schema.type_of(atom.column)}, literal is {atom.value!r}")
    for spec in query.aggregates:
        if spec.target is None:
            continue
        for col in spec.target.columns():
            if col not in schema.names:
                raise QueryError(f"unknown column {col!r} in aggregate")
            if schema.type_of(col) == "string":
                raise QueryError(f"aggregate over string column {col!r}")


def run(query: BoundedQuery | str, catalog: Catalog, *,
        cache: ReuseCache | None = None,
        default_confidence: float = 0.95) -> QueryResult:
    """Execute a bounded query end to end.

    No bound: exact execution on the original table.  Error bound: pick a
    family, build the error profile, run the chosen resolution.  Time bound:
    same with the latency profile.  Disjunctive predicates are rewritten into
    disjoint conjunctive subqueries first; their stratum summaries pool into
    one estimate, so additive aggregates combine exactly and variances add.
    """
    if isinstance(query, str):
        query = parser.parse(query, default_confidence=default_confidence)
    validate_query(query, catalog)
    if cache is None:
        cache = _session_cache(catalog)

    if query.bound is None:
        table = catalog.tables[query.table]
        scan = TableScan(table)
        result = execute_with_reuse(query, scan, 0, cache, catalog)
        if not result.groups:
            if query.group_by:
                return _build_result(query, {}, scan.sample_id, None)
            raise MissingSubgroupError("no rows match the predicate")
        estimates = finalize_estimates(result, scan, query, default_confidence)
        return _build_result(query, estimates, scan.sample_id, None)

    subqueries = rewrite_disjunction(query)
    confidence = (query.bound.confidence if isinstance(query.bound, ErrorBound)
                  else default_confidence)
    if len(subqueries) == 1:
        return _run_single(query, catalog, cache, confidence)
    return _run_union(query, subqueries, catalog, cache, confidence)


def _run_single(query: BoundedQuery, catalog: Catalog, cache: ReuseCache,
                confidence: float) -> QueryResult:
    sample, probes = select_family(query, catalog, cache)
    readable = readable_for(sample, catalog)
    if isinstance(query.bound, ErrorBound):
        profile, probe_result = build_error_profile(query, readable, query.bound,
                                                    catalog, cache)
    else:
        profile, probe_result = build_latency_profile(query, readable, query.bound,
                                                      catalog, cache)
    result = execute_with_reuse(query, readable, profile.chosen_level, cache, catalog)
    if not result.groups:
        if query.group_by:
            return _build_result(query, {}, readable.sample_id, profile)
        raise MissingSubgroupError("no rows match the predicate in the sample")
    estimates = finalize_estimates(result, readable, query, confidence)
    _merge_profile_flags(estimates, profile)
    return _build_result(query, estimates, result.sample_id, profile)


def _run_union(query: BoundedQuery, subqueries: list[BoundedQuery],
               catalog: Catalog, cache: ReuseCache, confidence: float
               ) -> QueryResult:
    p = len(subqueries)
    bound = query.bound
    started = time.perf_counter()
    pieces: list[tuple[object, ExecutionResult, ErrorLatencyProfile]] = []
    flags: set[str] = set()
    for sub in subqueries:
        if isinstance(bound, ErrorBound):
            # equal variance split: each subquery gets budget/p, i.e. its
            # half-width target shrinks by sqrt(p)
            sub_bound = ErrorBound(bound.value / math.sqrt(p), bound.kind,
                                   bound.confidence)
        else:
            remaining = bound.seconds - (time.perf_counter() - started)
            sub_bound = TimeBound(max(remaining, bound.seconds * 0.05))
        sub = sub.with_bound(sub_bound)
        sample, _ = select_family(sub, catalog, cache)
        readable = readable_for(sample, catalog)
        try:
            if isinstance(sub_bound, ErrorBound):
                profile, _ = build_error_profile(sub, readable, sub_bound,
                                                 catalog, cache)
            else:
                profile, _ = build_latency_profile(sub, readable, sub_bound,
                                                   catalog, cache)
        except MissingSubgroupError:
            continue  # an empty disjunct contributes exactly nothing
        result = execute_with_reuse(sub, readable, profile.chosen_level, cache,
                                    catalog)
        flags.update(profile.flags)
        pieces.append((readable, result, profile))
    if not pieces:
        raise MissingSubgroupError("no disjunct matched any sampled rows")

    # pool per-stratum summaries across the disjoint subqueries
    aggs = query.aggregates
    keys = sorted_group_keys({k for _, r, _ in pieces for k in r.groups})
    estimates: dict[tuple, list[GroupEstimate]] = {}
    sample_ids = ";".join(sorted({r.sample_id for _, r, _ in pieces}))
    for gkey in keys:
        per_agg = []
        for ai, spec in enumerate(aggs):
            strata = []
            for readable, result, _ in pieces:
                by_freq = result.groups.get(gkey)
                if not by_freq:
                    continue
                for f in sorted(by_freq):
                    matched, sums, sqs, bufs = by_freq[f]
                    buf = bufs[ai]
                    strata.append(StratumSummary(
                        weight=readable.weight_of(f, result.level),
                        rows_read=result.reads_by_freq[f], matched=matched,
                        sum_y=sums[ai], sum_sq=sqs[ai],
                        values=None if buf is None else np.concatenate(buf),
                    ))
            g = estimate(spec, strata, pieces[0][0].source_rows, confidence,
                         uniform=False, key=gkey, sample_id=sample_ids)
            if flags:
                g.flags = tuple(sorted(set(g.flags) | flags))
            per_agg.append(g)
        estimates[gkey] = per_agg
    return _build_result(query, estimates, sample_ids, pieces[0][2])


def _merge_profile_flags(estimates, profile: ErrorLatencyProfile) -> None:
    extra = tuple(f for f in profile.flags if f != "exact")
    if not extra:
        return
    for per_agg in estimates.values():
        for g in per_agg:
            g.flags = tuple(sorted(set(g.flags) | set(extra)))


def _build_result(query: BoundedQuery, estimates: dict[tuple, list[GroupEstimate]],
                  sample_id: str, profile) -> QueryResult:
    agg_items = [i for i in query.select if isinstance(i, AggregateItem)]
    rel_items = [i for i in query.select if isinstance(i, RelativeErrorItem)]
    rows = []
    for gkey in sorted_group_keys(estimates):
        for item, est in zip(agg_items, estimates[gkey]):
            rel = tuple((ri.confidence, est.relative_error_at(ri.confidence))
                        for ri in rel_items)
            rows.append(ResultRow(gkey, item.unparse(), est, rel))
    return QueryResult(query, rows, sample_id, profile, query.warnings)


def _session_cache(catalog: Catalog) -> ReuseCache:
    cache = getattr(catalog, "_reuse_cache", None)
    if cache is None:
        cache = ReuseCache()
        catalog._reuse_cache = cache
    return cache


def repl(catalog: Catalog, stdin, stdout, *, default_confidence: float = 0.95,
         prompt: bool = False) -> None:
    """One query per line; EOF (Ctrl-D) exits."""
    cache = _session_cache(catalog)
    while True:
        if prompt:
            stdout.write("straq> ")
            stdout.flush()
        line = stdin.readline()
        if not line:
            break
        line = line.strip()
        if not line:
            continue
        try:
            result = run(line, catalog, cache=cache,
                         default_confidence=default_confidence)
            for w in result.warnings:
                stdout.write(f"warning: {w}\n")
            stdout.write(result.format() + "\n")
        except Exception as exc:  # keep the loop alive on query errors
            stdout.write(f"error: {exc}\n")
        stdout.flush()
