"""Query-time machinery: sample selection, error/latency profiling, and
block-partitioned execution with intermediate-result reuse.

Execution is organized around per-block partial aggregates that are
independent of the resolution being queried: for every (output group, source
group frequency) pair a block contributes raw moments (match count, sum, sum
of squares, optional value buffer).  The expansion weight min-capped by the
level is applied only when partials are merged, so partials computed while
probing a small resolution are reused verbatim when the query escalates to a
larger one.  Merging always walks blocks in block order, which makes cached
and from-scratch execution bitwise identical.
"""

from __future__ import annotations

import hashlib
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .catalog import BLOCK_ROWS, Catalog, TableHandle, group_codes
from .errors import (
    EstimationError,
    MissingSubgroupError,
    QueryError,
    SampleError,
    TimeBoundError,
)
from .estimator import (
    AggregateSpec,
    ConfidenceSpec,
    GroupEstimate,
    PilotStats,
    StratumSummary,
    estimate,
    estimate_density,
    normal_quantile,
    required_rows,
    z_for_confidence,
)
from .query_ast import (
    BoundedQuery,
    ErrorBound,
    TimeBound,
    eval_predicate,
    negate_conjunction,
)
from .sampling import SampleFamily, UniformSample

MAX_DISJUNCTS = 64
PROBE_MAX_RUNS = 3
PROBE_RATE_TOLERANCE = 0.2

UNIFORM_FREQ_KEY = 0  # frequency slot for constant-weight samples


# -- sample adapters ----------------------------------------------------------


class _Readable:
    """Uniform view over table scans, uniform samples, and family levels."""

    sample_id: str
    cache_scope: str
    source_rows: int
    level_count: int

    def data(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def freq_of_rows(self) -> np.ndarray | None:
        return None

    def level_row_count(self, level: int) -> int:
        raise NotImplementedError

    def weight_of(self, freq: int, level: int) -> float:
        raise NotImplementedError

    def block_bounds(self) -> list[tuple[int, int]]:
        raise NotImplementedError

    def level_block_count(self, level: int) -> int:
        rows = self.level_row_count(level)
        bounds = self.block_bounds()
        count = 0
        for _, stop in bounds:
            if stop <= rows:
                count += 1
        return count


def _even_blocks(total: int) -> list[tuple[int, int]]:
    return [(start, min(start + BLOCK_ROWS, total))
            for start in range(0, total, BLOCK_ROWS)] or []


class TableScan(_Readable):
    """The original table as a rate-1 sample (exact execution path)."""

    def __init__(self, table: TableHandle):
        self.table = table
        self.sample_id = f"table:{table.name}"
        self.cache_scope = self.sample_id
        self.source_rows = table.row_count
        self.level_count = 1

    def data(self):
        return self.table.columns()

    def level_row_count(self, level):
        return self.table.row_count

    def weight_of(self, freq, level):
        return 1.0

    def block_bounds(self):
        return _even_blocks(self.table.row_count)


class UniformRead(_Readable):
    def __init__(self, sample: UniformSample):
        self.sample = sample
        self.sample_id = sample.sample_id
        self.cache_scope = f"{sample.sample_id}:s{sample.seed}"
        self.source_rows = sample.source_rows
        self.level_count = 1

    def data(self):
        return self.sample.data

    def level_row_count(self, level):
        return self.sample.row_count

    def weight_of(self, freq, level):
        return 1.0 / self.sample.p

    def block_bounds(self):
        return _even_blocks(self.sample.row_count)


class FamilyRead(_Readable):
    def __init__(self, family: SampleFamily, source_rows: int):
        self.family = family
        self.sample_id = family.sample_id
        self.cache_scope = f"{family.sample_id}:s{family.seed}"
        self.source_rows = source_rows
        self.level_count = family.level_count

    def data(self):
        return self.family.data

    def freq_of_rows(self):
        return self.family.group_freq_of_row

    def level_row_count(self, level):
        return self.family.level_rows(level)

    def weight_of(self, freq, level):
        cap = self.family.caps[level]
        return freq / cap if freq > cap else 1.0

    def block_bounds(self):
        # rings are blocked independently so every level is a whole-block prefix
        bounds, offset = [], 0
        for size in self.family.ring_rows:
            for start, stop in _even_blocks(size):
                bounds.append((offset + start, offset + stop))
            offset += size
        return bounds


def readable_for(sample, catalog: Catalog) -> _Readable:
    if isinstance(sample, SampleFamily):
        return FamilyRead(sample, catalog.tables[sample.table].row_count)
    if isinstance(sample, UniformSample):
        return UniformRead(sample)
    if isinstance(sample, TableHandle):
        return TableScan(sample)
    raise QueryError(f"cannot read from {sample!r}")


# -- block partials and the reuse cache ----------------------------------------


@dataclass
class BlockPartial:
    """Raw per-block aggregate state, independent of the queried level."""

    rows: int
    reads_by_freq: dict[int, int]
    # (group key, source frequency) -> [matched, [sum per agg], [sumsq per agg],
    #                                   [value buffer per agg or None]]
    groups: dict[tuple, list]
    digest: str = ""

    def compute_digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(repr(self.rows).encode())
        for key in sorted(self.reads_by_freq):
            h.update(repr((key, self.reads_by_freq[key])).encode())
        for key in sorted(self.groups, key=repr):
            matched, sums, sqs, bufs = self.groups[key]
            h.update(repr((key, matched, sums, sqs)).encode())
            for buf in bufs:
                if buf is not None:
                    h.update(buf.tobytes())
        return h.hexdigest()

    def seal(self) -> "BlockPartial":
        self.digest = self.compute_digest()
        return self


class ReuseCache:
    """Maps (query fingerprint, sample scope, block id) to sealed partials.

    Concurrent readers are safe; writers serialize on the lock.  A digest
    mismatch counts as corruption: the entry is dropped and recomputed.
    """

    def __init__(self):
        self._store: dict[tuple, BlockPartial] = {}
        self._lock = threading.Lock()
        self.corruption_events = 0
        self.hits = 0
        self.misses = 0

    def get(self, key) -> BlockPartial | None:
        partial = self._store.get(key)
        if partial is None:
            self.misses += 1
            return None
        if partial.digest != partial.compute_digest():
            with self._lock:
                self._store.pop(key, None)
                self.corruption_events += 1
            self.misses += 1
            return None
        self.hits += 1
        return partial

    def put(self, key, partial: BlockPartial) -> None:
        with self._lock:
            self._store[key] = partial


def _compute_block_partial(query: BoundedQuery, readable: _Readable,
                           start: int, stop: int,
                           aggs: tuple[AggregateSpec, ...],
                           buffer_values: tuple[bool, ...]) -> BlockPartial:
    data = readable.data()
    cols = {c: data[c][start:stop] for c in data}
    n = stop - start
    mask = eval_predicate(query.predicate, cols, n)

    freq_all = readable.freq_of_rows()
    if freq_all is None:
        freqs = None
        reads_by_freq = {UNIFORM_FREQ_KEY: n}
    else:
        block_freqs = freq_all[start:stop]
        uniq, counts = np.unique(block_freqs, return_counts=True)
        reads_by_freq = {int(f): int(c) for f, c in zip(uniq, counts)}
        freqs = block_freqs

    idx = np.flatnonzero(mask)
    groups: dict[tuple, list] = {}
    if len(idx):
        if query.group_by:
            codes, keys = group_codes([cols[c][idx] for c in query.group_by])
        else:
            codes, keys = np.zeros(len(idx), dtype=np.int64), [()]
        row_freq = freqs[idx] if freqs is not None else np.full(
            len(idx), UNIFORM_FREQ_KEY, dtype=np.int64)
        pair = codes * (int(row_freq.max()) + 1) + row_freq
        pair_uniq, pair_codes = np.unique(pair, return_inverse=True)
        k = len(pair_uniq)
        matched = np.bincount(pair_codes, minlength=k)
        agg_sums, agg_sqs, agg_bufs = [], [], []
        for spec, buffered in zip(aggs, buffer_values):
            if spec.target is None:
                agg_sums.append(np.zeros(k))
                agg_sqs.append(np.zeros(k))
                agg_bufs.append([None] * k)
                continue
            values = np.asarray(spec.target.eval(cols), dtype=np.float64)
            if values.ndim == 0:
                values = np.full(n, float(values))
            values = values[idx]
            agg_sums.append(np.bincount(pair_codes, weights=values, minlength=k))
            agg_sqs.append(np.bincount(pair_codes, weights=values * values,
                                       minlength=k))
            if buffered:
                order = np.argsort(pair_codes, kind="stable")
                splits = np.cumsum(np.bincount(pair_codes, minlength=k))[:-1]
                agg_bufs.append(np.split(values[order], splits))
            else:
                agg_bufs.append([None] * k)
        base = int(row_freq.max()) + 1
        for j, pcode in enumerate(pair_uniq):
            gcode, f = divmod(int(pcode), base)
            key = (keys[gcode], int(f))
            groups[key] = [
                int(matched[j]),
                [float(s[j]) for s in agg_sums],
                [float(s[j]) for s in agg_sqs],
                [None if bufs[j] is None else np.sort(bufs[j], kind="stable")
                 for bufs in agg_bufs],
            ]
    return BlockPartial(rows=n, reads_by_freq=reads_by_freq, groups=groups).seal()


@dataclass
class ExecutionResult:
    """Merged result of one execution at one level."""

    sample_id: str
    level: int
    rows_read: int          # rows of the level (logical reads)
    fresh_rows: int         # rows actually computed this run
    fresh_blocks: tuple[int, ...]
    reads_by_freq: dict[int, int]
    groups: dict[tuple, dict[int, list]]  # key -> freq -> [matched, sums, sqs, bufs]
    elapsed: float

    def total_matched(self) -> int:
        return sum(m[0] for by_freq in self.groups.values()
                   for m in by_freq.values())


def execute_with_reuse(query: BoundedQuery, sample, level: int,
                       cache: ReuseCache | None, catalog: Catalog, *,
                       force_fresh: bool = False) -> ExecutionResult:
    """Run the query on one resolution, computing only blocks not already
    cached under this query's fingerprint; merge order is block order."""
    readable = sample if isinstance(sample, _Readable) else readable_for(sample, catalog)
    if not (0 <= level < readable.level_count):
        raise SampleError(f"level {level} outside [0, {readable.level_count})")
    aggs = query.aggregates
    buffer_values = tuple(a.op == "quantile" for a in aggs)
    fingerprint = query.fingerprint()
    bounds = readable.block_bounds()
    level_rows = readable.level_row_count(level)

    t0 = time.perf_counter()
    merged_reads: dict[int, int] = {}
    merged_groups: dict[tuple, dict[int, list]] = {}
    fresh_rows = 0
    fresh_blocks: list[int] = []
    for block_id, (start, stop) in enumerate(bounds):
        if stop > level_rows:
            break
        key = (fingerprint, readable.cache_scope, block_id)
        partial = None
        if cache is not None and not force_fresh:
            partial = cache.get(key)
        if partial is None:
            partial = _compute_block_partial(query, readable, start, stop,
                                             aggs, buffer_values)
            fresh_rows += stop - start
            fresh_blocks.append(block_id)
            if cache is not None:
                cache.put(key, partial)
        for f, c in partial.reads_by_freq.items():
            merged_reads[f] = merged_reads.get(f, 0) + c
        for (gkey, f), (matched, sums, sqs, bufs) in partial.groups.items():
            slot = merged_groups.setdefault(gkey, {}).get(f)
            if slot is None:
                merged_groups[gkey][f] = [matched, list(sums), list(sqs),
                                          [None if b is None else [b] for b in bufs]]
            else:
                slot[0] += matched
                for i in range(len(aggs)):
                    slot[1][i] += sums[i]
                    slot[2][i] += sqs[i]
                    if bufs[i] is not None:
                        slot[3][i].append(bufs[i])
    elapsed = time.perf_counter() - t0
    return ExecutionResult(
        sample_id=readable.sample_id, level=level, rows_read=level_rows,
        fresh_rows=fresh_rows, fresh_blocks=tuple(fresh_blocks),
        reads_by_freq=merged_reads, groups=merged_groups, elapsed=elapsed,
    )


def sorted_group_keys(keys) -> list[tuple]:
    """Natural group-key order; repr order for non-comparable mixtures."""
    try:
        return sorted(keys)
    except TypeError:
        return sorted(keys, key=repr)


def finalize_estimates(result: ExecutionResult, readable: _Readable,
                       query: BoundedQuery, confidence: float = 0.95,
                       ) -> dict[tuple, list[GroupEstimate]]:
    """Turn merged raw moments into per-group estimates for every aggregate."""
    aggs = query.aggregates
    uniform = readable.freq_of_rows() is None
    out: dict[tuple, list[GroupEstimate]] = {}
    for gkey in sorted_group_keys(result.groups):
        by_freq = result.groups[gkey]
        per_agg: list[GroupEstimate] = []
        for ai, spec in enumerate(aggs):
            strata = []
            for f in sorted(by_freq):
                matched, sums, sqs, bufs = by_freq[f]
                buf = bufs[ai]
                strata.append(StratumSummary(
                    weight=readable.weight_of(f, result.level),
                    rows_read=result.reads_by_freq[f],
                    matched=matched,
                    sum_y=sums[ai], sum_sq=sqs[ai],
                    values=None if buf is None else np.concatenate(buf),
                ))
            per_agg.append(estimate(
                spec, strata, readable.source_rows, confidence,
                uniform=uniform, key=gkey, sample_id=result.sample_id,
            ))
        out[gkey] = per_agg
    return out


# -- family selection ----------------------------------------------------------


@dataclass
class ProbeRecord:
    sample_id: str
    rows_read: int
    rows_matched: int
    elapsed: float

    @property
    def ratio(self) -> float:
        return self.rows_matched / self.rows_read if self.rows_read else 0.0


def select_family(query: BoundedQuery, catalog: Catalog,
                  cache: ReuseCache | None = None
                  ) -> tuple[object, list[ProbeRecord]]:
    """Pick the sample to answer a conjunctive query.

    A stratified family whose columns cover the query's template wins, with
    the fewest columns (ties: smaller store, then id).  Otherwise the query
    is probed on the smallest resolution of every family plus the uniform
    sample, and the best selected/read ratio wins (ties: lexicographic id).
    """
    table = query.table
    if table not in catalog.tables:
        raise QueryError(f"unknown table {table!r}")
    families = [f for f in catalog.families.values() if f.table == table]
    uniform = catalog.uniforms.get(table)
    if not families and uniform is None:
        raise QueryError(f"no samples exist for table {table!r}")

    phi_q = set(query.template_columns())
    covering = [f for f in families if phi_q <= set(f.phi)]
    if phi_q and covering:
        covering.sort(key=lambda f: (len(f.phi), f.store_rows, f.family_id))
        return covering[0], []

    candidates: list = sorted(families, key=lambda f: f.sample_id)
    if uniform is not None:
        candidates.append(uniform)
    probes, best, best_key = [], None, None
    for sample in candidates:
        readable = readable_for(sample, catalog)
        result = execute_with_reuse(query, readable, readable.level_count - 1,
                                    cache, catalog)
        record = ProbeRecord(readable.sample_id, result.rows_read,
                             result.total_matched(), result.elapsed)
        probes.append(record)
        key = (-record.ratio, record.sample_id)
        if best_key is None or key < best_key:
            best_key, best = key, sample
    return best, probes


# -- disjunction rewrite ---------------------------------------------------------


def rewrite_disjunction(query: BoundedQuery) -> list[BoundedQuery]:
    """Split a disjunctive query into pairwise-disjoint conjunctive subqueries.

    Subquery i keeps disjunct i and conjoins the negation of every earlier
    disjunct, so additive aggregates combine exactly: COUNT/SUM add, and
    their variances add.
    """
    disjuncts = query.predicate
    if len(disjuncts) <= 1:
        return [query]
    if len(disjuncts) > MAX_DISJUNCTS:
        raise QueryError(f"predicate has more than {MAX_DISJUNCTS} disjuncts")
    out = []
    for i, conj in enumerate(disjuncts):
        pred = (conj,)
        for earlier in disjuncts[:i]:
            negated = negate_conjunction(earlier)
            pred = tuple(c1 + c2 for c1 in pred for c2 in negated)
            if len(pred) > MAX_DISJUNCTS:
                raise QueryError(
                    f"disjointness rewrite exceeds {MAX_DISJUNCTS} disjuncts")
        out.append(query.with_predicate(pred))
    return out


# -- error-latency profiles -------------------------------------------------------


@dataclass
class ErrorLatencyProfile:
    sample_id: str
    probe_level: int
    probe_cap: int
    rows_read: int
    rows_matched: int
    required_rows: int
    chosen_level: int
    chosen_cap: int
    rate_rows_per_s: float = 0.0
    probe_elapsed: float = 0.0
    flags: tuple[str, ...] = ()
    pilot: dict = field(default_factory=dict)

    @property
    def selectivity(self) -> float:
        return self.rows_matched / self.rows_read if self.rows_read else 0.0

    def dump(self) -> str:
        lines = [
            f"sample: {self.sample_id}",
            f"probe_level: {self.probe_level}",
            f"probe_cap: {self.probe_cap}",
            f"rows_read: {self.rows_read}",
            f"rows_matched: {self.rows_matched}",
            f"selectivity: {self.selectivity!r}",
            f"rate_rows_per_s: {self.rate_rows_per_s!r}",
            f"required_rows: {self.required_rows}",
            f"chosen_level: {self.chosen_level}",
            f"chosen_cap: {self.chosen_cap}",
            f"flags: {','.join(self.flags) if self.flags else '-'}",
        ]
        return "\n".join(lines)


def _chi2_lower_quantile(alpha: float, k: int) -> float:
    """Lower alpha-quantile of chi-square with k degrees of freedom (exact for
    k <= 2, Wilson-Hilferty beyond)."""
    if k <= 0:
        raise EstimationError("chi-square needs k >= 1")
    if k == 1:
        z = z_for_confidence(alpha)  # P(Z^2 <= z^2) = alpha
        return z * z
    if k == 2:
        return -2.0 * math.log1p(-alpha)
    z = normal_quantile(alpha)
    t = 2.0 / (9.0 * k)
    return k * (1.0 - t + z * math.sqrt(t)) ** 3


def _variance_inflation(matched: int) -> float:
    """Upper 95% confidence factor on a variance estimated from ``matched``
    rows; tiny probes produce unreliable pilots, so the inverted sample sizes
    are deliberately conservative."""
    if matched <= 1:
        return math.inf
    return (matched - 1) / _chi2_lower_quantile(0.05, matched - 1)


def _wilson_interval(successes: int, trials: int, z: float = 1.959964
                     ) -> tuple[float, float]:
    if trials == 0:
        return (0.0, 1.0)
    phat = successes / trials
    denom = 1.0 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials
                         + z * z / (4 * trials * trials)) / denom
    return (max(center - half, 0.0), min(center + half, 1.0))


def _pilot_for_group(spec: AggregateSpec, by_freq: dict[int, list], ai: int,
                     reads_total: int, source_rows: int,
                     conservative: bool = True) -> PilotStats:
    matched = sum(v[0] for v in by_freq.values())
    sum_y = sum(v[1][ai] for v in by_freq.values())
    sum_sq = sum(v[2][ai] for v in by_freq.values())
    inflate = _variance_inflation(matched) if conservative else 1.0
    pilot = PilotStats(source_rows=source_rows)
    if spec.op == "avg":
        pilot.estimate = sum_y / matched
        mean = pilot.estimate
        s2 = max((sum_sq - matched * mean * mean) / (matched - 1), 0.0) \
            if matched >= 2 else 0.0
        pilot.variance_s2 = s2 * inflate
    elif spec.op == "count":
        pilot.c_hat = matched / reads_total
        pilot.estimate = source_rows * pilot.c_hat
        if conservative:
            # use the c in the Wilson interval that maximizes c(1-c)
            lo, hi = _wilson_interval(matched, reads_total)
            worst = 0.5 if lo <= 0.5 <= hi else (lo if abs(lo - 0.5) < abs(hi - 0.5) else hi)
            pilot.c_hat = worst if worst * (1 - worst) > pilot.c_hat * (1 - pilot.c_hat) \
                else pilot.c_hat
    elif spec.op == "sum":
        mu0 = sum_y / reads_total
        s2 = max((sum_sq - reads_total * mu0 * mu0)
                 / (reads_total - 1), 0.0) if reads_total >= 2 else 0.0
        pilot.zero_filled_s2 = s2 * inflate
        pilot.estimate = source_rows * mu0
    else:  # quantile
        bufs = [v[3][ai] for v in by_freq.values() if v[3][ai] is not None]
        values = np.sort(np.concatenate([np.concatenate(b) if isinstance(b, list)
                                         else b for b in bufs]), kind="stable")
        pilot.estimate = float(np.interp(
            min(max(spec.p * len(values), 1), len(values)),
            np.arange(1, len(values) + 1), values))
        density = estimate_density(values, pilot.estimate) if len(values) >= 2 else None
        if density is not None and math.isfinite(inflate):
            density /= math.sqrt(inflate)
        pilot.density = density
    return pilot


def _required_anchor(spec: AggregateSpec, by_freq, reads_total) -> int:
    """Probe quantity the required-rows figure scales against: matched rows
    for AVG/QUANTILE, read rows for COUNT/SUM (their variances are per read)."""
    if spec.op in ("count", "sum"):
        return reads_total
    return sum(v[0] for v in by_freq.values())


def choose_error_level(caps: tuple[int, ...], required: int, probe_cap: int,
                       probe_matched: int) -> tuple[int, bool]:
    """Error-bound rule: the smallest cap strictly larger than
    required * (probe_cap / probe_matched).  Returns (level, guaranteed);
    when even the largest cap falls short, level 0 is chosen unguaranteed."""
    threshold = required * (probe_cap / probe_matched)
    larger = [i for i, k in enumerate(caps) if k > threshold]
    if larger:
        return max(larger), True
    return 0, False


def choose_time_level(caps: tuple[int, ...], budget_rows: float, probe_cap: int,
                      probe_reads: int) -> tuple[int, bool]:
    """Time-bound rule: the largest cap strictly smaller than
    budget_rows * (probe_cap / probe_reads).  Returns (level, within_budget);
    when even the smallest cap is too big, it is chosen flagged."""
    threshold = budget_rows * (probe_cap / probe_reads) if probe_reads else math.inf
    smaller = [i for i, k in enumerate(caps) if k < threshold]
    if smaller:
        return min(smaller), True
    return len(caps) - 1, False


def build_error_profile(query: BoundedQuery, sample, bound: ErrorBound,
                        catalog: Catalog, cache: ReuseCache | None
                        ) -> tuple[ErrorLatencyProfile, ExecutionResult]:
    """Probe the smallest resolution, invert the error formulas, and pick the
    smallest cap whose projected matched rows meet the requirement."""
    readable = sample if isinstance(sample, _Readable) else readable_for(sample, catalog)
    probe_level = readable.level_count - 1
    result = execute_with_reuse(query, readable, probe_level, cache, catalog)
    n_im = result.total_matched()
    if n_im == 0:
        raise MissingSubgroupError(
            "probe matched no rows; the subgroup is absent from the sample")
    caps = getattr(readable, "family", None)
    caps = caps.caps if caps is not None else (readable.level_row_count(0),)
    probe_cap = caps[probe_level]
    reads_total = result.rows_read
    flags: list[str] = []
    pilots: dict = {}

    # exact short-circuit: every touched group fully kept at the probe level
    all_kept = all(
        readable.weight_of(f, probe_level) == 1.0
        for by_freq in result.groups.values() for f in by_freq
    )
    if all_kept:
        profile = ErrorLatencyProfile(
            sample_id=readable.sample_id, probe_level=probe_level,
            probe_cap=probe_cap, rows_read=reads_total, rows_matched=n_im,
            required_rows=n_im, chosen_level=probe_level, chosen_cap=probe_cap,
            probe_elapsed=result.elapsed, flags=("exact",),
        )
        return profile, result

    conf = ConfidenceSpec(bound.confidence, bound.epsilon, bound.kind)
    need_factor = 0.0
    for gkey, by_freq in result.groups.items():
        for ai, spec in enumerate(query.aggregates):
            pilot = _pilot_for_group(spec, by_freq, ai, reads_total,
                                     readable.source_rows)
            pilots[(gkey, ai)] = pilot
            try:
                need = required_rows(spec, conf, pilot)
            except EstimationError:
                flags.append("pilot-inversion-failed")
                continue
            anchor = _required_anchor(spec, by_freq, reads_total)
            if anchor:
                need_factor = max(need_factor, need / anchor)

    if math.isinf(need_factor):
        flags.append("pilot-insufficient")
        required_total = n_im
        chosen, guaranteed = 0, True
    else:
        required_total = max(n_im, math.ceil(need_factor * n_im))
        chosen, guaranteed = choose_error_level(caps, required_total, probe_cap,
                                                n_im)
        if not guaranteed:
            flags.append("bound-not-guaranteed")
    profile = ErrorLatencyProfile(
        sample_id=readable.sample_id, probe_level=probe_level,
        probe_cap=probe_cap, rows_read=reads_total, rows_matched=n_im,
        required_rows=required_total, chosen_level=chosen,
        chosen_cap=caps[chosen], probe_elapsed=result.elapsed,
        flags=tuple(flags), pilot=pilots,
    )
    return profile, result


def build_latency_profile(query: BoundedQuery, sample, bound: TimeBound,
                          catalog: Catalog, cache: ReuseCache | None
                          ) -> tuple[ErrorLatencyProfile, ExecutionResult]:
    """Fit a linear rows-per-second model from small probe runs and pick the
    largest cap whose projected rows fit the remaining time budget."""
    readable = sample if isinstance(sample, _Readable) else readable_for(sample, catalog)
    probe_level = readable.level_count - 1
    start = time.perf_counter()
    result = execute_with_reuse(query, readable, probe_level, cache, catalog)
    flags: list[str] = []
    rates = [result.fresh_rows / result.elapsed if result.elapsed > 0 else math.inf]
    runs = 1
    level = probe_level
    last = result
    while runs < PROBE_MAX_RUNS:
        elapsed_so_far = time.perf_counter() - start
        if elapsed_so_far >= bound.seconds:
            break
        next_level = max(level - 1, 0)
        force = next_level == level  # single-level samples: re-run uncached
        run = execute_with_reuse(query, readable, next_level, cache, catalog,
                                 force_fresh=force)
        fresh = run.fresh_rows if run.fresh_rows else run.rows_read
        rates.append(fresh / run.elapsed if run.elapsed > 0 else math.inf)
        runs += 1
        level = next_level
        last = run
        if abs(rates[-1] - rates[-2]) <= PROBE_RATE_TOLERANCE * rates[-1]:
            break
    if runs == PROBE_MAX_RUNS and len(rates) >= 2 and \
            abs(rates[-1] - rates[-2]) > PROBE_RATE_TOLERANCE * rates[-1]:
        flags.append("rate-unstable")
    rho = rates[-1]

    n_im = result.total_matched()
    caps = getattr(readable, "family", None)
    caps = caps.caps if caps is not None else (readable.level_row_count(0),)
    probe_cap = caps[probe_level]
    elapsed_probe = time.perf_counter() - start
    remaining = bound.seconds - elapsed_probe
    if remaining <= 0:
        raise TimeBoundError(
            f"time bound {bound.seconds}s is smaller than the probe cost "
            f"({elapsed_probe:.4f}s)")
    budget_rows = rho * remaining
    reads_probe = result.rows_read
    chosen, within = choose_time_level(caps, budget_rows, probe_cap, reads_probe)
    if not within:
        flags.append("bound-may-be-exceeded")
    profile = ErrorLatencyProfile(
        sample_id=readable.sample_id, probe_level=probe_level,
        probe_cap=probe_cap, rows_read=reads_probe, rows_matched=n_im,
        required_rows=int(budget_rows) if math.isfinite(budget_rows) else -1,
        chosen_level=chosen, chosen_cap=caps[chosen],
        rate_rows_per_s=rho, probe_elapsed=elapsed_probe, flags=tuple(flags),
    )
    return profile, last


# -- appendix lemma checks ---------------------------------------------------------


@dataclass(frozen=True)
class LemmaCheck:
    k_opt: int
    k_prime: int
    factor: float
    bound: float
    holds: bool


def lemma_bound_check(family: SampleFamily, k_opt: int, mode: str) -> LemmaCheck:
    """Check the family-discretization guarantees against an ideal cap.

    error mode: the chosen cap is the smallest family cap >= k_opt; the
    rows-read ratio (response-time proxy for an I/O-bound query) must be at
    most c + 1/k_opt.  time mode: the chosen cap is the largest cap <= k_opt;
    by the 1/sqrt(n) law the std-error ratio sqrt(k_opt/k') must be at most
    1/sqrt(1/c - 1/k_opt) (vacuous when k_opt <= c).
    """
    caps = family.caps
    if not (caps[-1] <= k_opt <= caps[0]):
        raise SampleError(f"k_opt {k_opt} outside family range [{caps[-1]}, {caps[0]}]")
    c = family.ratio
    if mode == "error":
        k_prime = min(k for k in caps if k >= k_opt)
        factor = k_prime / k_opt
        bound = c + 1.0 / k_opt
    elif mode == "time":
        k_prime = max(k for k in caps if k <= k_opt)
        factor = math.sqrt(k_opt / k_prime)
        denom = 1.0 / c - 1.0 / k_opt
        bound = math.inf if denom <= 0 else 1.0 / math.sqrt(denom)
    else:
        raise SampleError(f"unknown lemma mode {mode!r}")
    return LemmaCheck(k_opt, k_prime, factor, bound, factor <= bound)
