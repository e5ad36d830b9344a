"""Uniform samples, nested multi-resolution stratified sample families, and
the Zipf storage-overhead calculator.

A sample family on column set ``phi`` keeps, for every distinct value of
``phi``, at most ``base_cap`` rows; nested levels shrink the cap by the
integer ``ratio``: cap(i) = floor(base_cap / ratio**i) for i in [0, m) with
m = floor(log_ratio(base_cap)).  Nesting is realized by assigning each row a
per-group random permutation rank once: level i is exactly the rows with
rank < cap(i), so smaller levels are rank-filtered views of the one
materialized sample and nesting holds by construction.

Physically the kept rows are stored ring-major: first the rows of the
smallest level, then the increment that completes the next level, and so on,
each increment sorted by the columns of ``phi`` (then rank) and blocked
separately.  Level i therefore maps to a prefix of the block sequence, which
is what makes block-level result reuse sound at query time.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import catalog as _catalog
from .catalog import (
    BlockRef,
    Catalog,
    ColumnStats,
    FrequencyTable,
    Schema,
    TableHandle,
    group_codes,
    read_blocks,
    write_blocks,
)
from .errors import SampleError, SchemaError


@dataclass(frozen=True)
class ColumnSet:
    """Ordered, duplicate-free column names; order fixes the sample sort order."""

    columns: tuple[str, ...]

    def __post_init__(self):
        if not self.columns:
            raise SampleError("column set must be non-empty")
        if len(set(self.columns)) != len(self.columns):
            raise SampleError(f"duplicate column in {self.columns}")

    @classmethod
    def of(cls, *names: str) -> "ColumnSet":
        return cls(tuple(names))

    def issubset(self, other: "ColumnSet | Sequence[str]") -> bool:
        other_cols = other.columns if isinstance(other, ColumnSet) else tuple(other)
        return set(self.columns) <= set(other_cols)

    def __iter__(self):
        return iter(self.columns)

    def __len__(self):
        return len(self.columns)

    def __str__(self):
        return "+".join(self.columns)


def _group_hash(key: tuple) -> int:
    """Stable 64-bit hash of a group key, independent of PYTHONHASHSEED."""
    h = hashlib.sha256()
    for v in key:
        if isinstance(v, (int, np.integer)):
            h.update(b"i" + str(int(v)).encode())
        elif isinstance(v, (float, np.floating)):
            h.update(b"f" + repr(float(v)).encode())
        else:
            h.update(b"s" + str(v).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


# -- uniform samples --------------------------------------------------------


class UniformSample:
    """Rows of a table drawn independently with probability p under a seed."""

    def __init__(self, table: str, schema: Schema, p: float, seed: int,
                 data: dict[str, np.ndarray], source_rows: int,
                 blocks: list[BlockRef] | None = None):
        self.table = table
        self.schema = schema
        self.p = p
        self.seed = seed
        self.data = data
        self.source_rows = source_rows
        self.blocks = blocks or []
        self.row_count = len(next(iter(data.values()))) if data else 0

    @property
    def sample_id(self) -> str:
        return f"uniform:{self.table}"

    @property
    def rate(self) -> float:
        return self.p

    def persist(self, cat: Catalog) -> None:
        subdir = f"samples/{self.table}__uniform__s{self.seed}"
        self.blocks = write_blocks(cat.root, subdir, self.data, self.schema,
                                   self.row_count)


def build_uniform(table: TableHandle, p: float, seed: int) -> UniformSample:
    """Draw each row of ``table`` independently with probability ``p``."""
    if not (0.0 < p <= 1.0):
        raise SampleError(f"sampling probability {p} outside (0, 1]")
    rng = np.random.default_rng((int(seed), _group_hash(("uniform",))))
    mask = rng.random(table.row_count) < p
    cols = table.columns()
    data = {name: cols[name][mask] for name in table.schema.names}
    return UniformSample(table.name, table.schema, p, seed, data, table.row_count)


# -- stratified sample families ----------------------------------------------


def level_caps(base_cap: int, ratio: int) -> tuple[int, ...]:
    """cap(i) = floor(base_cap / ratio**i), one per level.

    A family always has at least one level (the materialized sample itself),
    so base_cap below the ratio yields the single-level family.
    """
    if base_cap < 1:
        raise SampleError(f"base cap {base_cap} must be >= 1")
    if ratio < 2:
        raise SampleError(f"ratio {ratio} must be an integer >= 2")
    m = 0
    while ratio ** (m + 1) <= base_cap:
        m += 1
    m = max(m, 1)
    return tuple(base_cap // ratio**i for i in range(m))


class SampleFamily:
    """Nested stratified samples on ``phi`` sharing one materialized row set."""

    def __init__(self, table: str, schema: Schema, phi: ColumnSet,
                 base_cap: int, ratio: int, seed: int,
                 data: dict[str, np.ndarray], ranks: np.ndarray,
                 group_freq_of_row: np.ndarray, freq: FrequencyTable,
                 ring_rows: tuple[int, ...],
                 blocks: list[BlockRef] | None = None):
        self.table = table
        self.schema = schema
        self.phi = phi
        self.base_cap = base_cap
        self.ratio = ratio
        self.seed = seed
        self.caps = level_caps(base_cap, ratio)
        self.data = data
        self.ranks = ranks
        self.group_freq_of_row = group_freq_of_row
        self.freq = freq
        self.ring_rows = ring_rows  # innermost level first
        self.blocks = blocks or []

    @property
    def family_id(self) -> str:
        return f"{self.table}/{self.phi}"

    @property
    def sample_id(self) -> str:
        return f"family:{self.family_id}"

    @property
    def level_count(self) -> int:
        return len(self.caps)

    @property
    def store_rows(self) -> int:
        return len(self.ranks)

    def level_rows(self, level: int) -> int:
        """Stored rows visible at ``level`` (a prefix of the row order)."""
        return int(sum(self.ring_rows[: self.level_count - level]))

    def persist(self, cat: Catalog) -> None:
        """Write the rows as per-ring block runs so levels map to whole blocks."""
        subdir = f"samples/{self.table}__{'_'.join(self.phi)}__s{self.seed}"
        blocks: list[BlockRef] = []
        start = 0
        for size in self.ring_rows:
            segment = {c: self.data[c][start:start + size] for c in self.schema.names}
            blocks.extend(
                write_blocks(cat.root, subdir, segment, self.schema, size,
                             start_block_id=len(blocks))
            )
            start += size
        # block row ranges are ring-local after write; rebase to family rows
        rebased, offset = [], 0
        for b in blocks:
            rebased.append(BlockRef(b.block_id, offset, offset + b.row_count,
                                    b.path, b.checksum))
            offset += b.row_count
        self.blocks = rebased


@dataclass
class LevelView:
    """No-copy view of one resolution of a family: the first ``rows`` rows."""

    family: SampleFamily
    level: int

    def __post_init__(self):
        if not (0 <= self.level < self.family.level_count):
            raise SampleError(
                f"level {self.level} outside [0, {self.family.level_count})"
            )

    @property
    def cap(self) -> int:
        return self.family.caps[self.level]

    @property
    def row_count(self) -> int:
        return self.family.level_rows(self.level)

    @property
    def sample_id(self) -> str:
        return f"{self.family.sample_id}@L{self.level}"

    def column(self, name: str) -> np.ndarray:
        return self.family.data[name][: self.row_count]

    @property
    def rates(self) -> np.ndarray:
        """Effective sampling rate per visible row: min(1, cap / F(group))."""
        freq = self.family.group_freq_of_row[: self.row_count]
        return np.minimum(1.0, self.cap / freq)

    @property
    def weights(self) -> np.ndarray:
        """Expansion weight per row, computed as F/cap so capped-group sums
        stay exact in float arithmetic."""
        freq = self.family.group_freq_of_row[: self.row_count]
        return np.where(freq > self.cap, freq / self.cap, 1.0)

    def group_row_counts(self) -> dict[tuple, int]:
        cols = [self.column(c) for c in self.family.phi]
        codes, keys = group_codes(cols)
        counts = np.bincount(codes, minlength=len(keys))
        return {k: int(c) for k, c in zip(keys, counts)}


def sample_at_level(family: SampleFamily, level: int) -> LevelView:
    """The rank-filtered view of ``family`` at resolution ``level``."""
    return LevelView(family, level)


def build_family(table: TableHandle, phi: ColumnSet, base_cap: int, ratio: int,
                 seed: int, stats: ColumnStats) -> SampleFamily:
    """Build the nested stratified sample family for ``phi``.

    Every group receives a seeded random permutation of ranks (the RNG stream
    is derived from the seed and a stable hash of the group key, so a group's
    contents do not depend on how its rows interleave with other groups).
    Rows with rank < base_cap are kept, grouped ring-major, and sorted by the
    columns of ``phi`` then rank within each ring.
    """
    for c in phi:
        if c not in table.schema.names:
            raise SchemaError(f"unknown column {c!r} in table {table.name!r}")
    caps = level_caps(base_cap, ratio)
    m = len(caps)
    try:
        freq = stats.freq(phi.columns)
    except KeyError:
        raise SampleError(f"no statistics for column set {phi}") from None

    cols = table.columns()
    codes, keys = group_codes([cols[c] for c in phi])
    counts = np.bincount(codes, minlength=len(keys)).astype(np.int64)

    ranks = np.empty(table.row_count, dtype=np.int64)
    order = np.argsort(codes, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)))
    for gi, key in enumerate(keys):
        rows = order[starts[gi]:starts[gi + 1]]
        rng = np.random.default_rng((int(seed), _group_hash(key)))
        ranks[rows] = rng.permutation(len(rows))

    kept = np.flatnonzero(ranks < base_cap)
    kept_ranks = ranks[kept]
    # ring r holds ranks in [cap(r+1), cap(r)); innermost ring is m-1
    ascending = np.asarray(caps[::-1], dtype=np.int64)
    ring = (m - 1) - np.searchsorted(ascending, kept_ranks, side="right")
    ring_order = (m - 1) - ring  # innermost first
    sort_keys = [kept_ranks]
    sort_keys.extend(cols[c][kept] for c in reversed(tuple(phi)))
    sort_keys.append(ring_order)
    perm = np.lexsort(tuple(sort_keys))
    kept = kept[perm]
    kept_ranks = kept_ranks[perm]
    ring_sizes = np.bincount(ring[perm], minlength=m)
    ring_rows = tuple(int(ring_sizes[r]) for r in range(m - 1, -1, -1))

    data = {c: cols[c][kept] for c in table.schema.names}
    group_freq_of_row = counts[codes[kept]]
    return SampleFamily(table.name, table.schema, phi, base_cap, ratio, seed,
                        data, kept_ranks, group_freq_of_row, freq, ring_rows)


def refresh_family(cat: Catalog, family: SampleFamily, new_seed: int,
                   pause: threading.Event | None = None,
                   on_block: Callable[[int], None] | None = None) -> SampleFamily:
    """Rebuild ``family`` with fresh ranks and atomically swap it in.

    Runs cooperatively: the source table is consumed one block at a time and
    the ``pause`` event is honored between blocks, so a foreground task can
    suspend the refresh.  The old family stays readable until the swap.
    """
    table = cat.tables.get(family.table)
    if table is None:
        raise SampleError(f"source table {family.table!r} no longer present")
    stats = cat.compute_stats(table, [family.phi.columns])

    # cooperative pass over the source blocks (rank assignment needs whole
    # groups, so this pass only paces the rebuild and honors preemption)
    for ref in table.blocks:
        if pause is not None:
            pause.wait()
        if on_block is not None:
            on_block(ref.block_id)

    fresh = build_family(table, family.phi, family.base_cap, family.ratio,
                         new_seed, stats)
    cat.swap_family(fresh)
    return fresh


def family_store_cost(phi: ColumnSet, cap: int, stats: ColumnStats) -> int:
    """Rows needed to materialize a family on ``phi`` with base cap ``cap``:
    sum over groups of min(cap, frequency)."""
    freq = stats.freq(tuple(phi))
    return int(np.minimum(freq.counts, cap).sum())


# -- Zipf storage overhead ---------------------------------------------------

_DIRECT_SUM_LIMIT = 1_000_000


def _power_sum(s: float, n: int) -> float:
    """Partial sum of x**-s for x in [1, n].

    Summed directly up to a million terms; beyond that the tail is evaluated
    with an Euler-Maclaurin expansion whose truncation error is far below
    float precision at these arguments.
    """
    if n <= 0:
        return 0.0
    head_n = min(n, _DIRECT_SUM_LIMIT)
    x = np.arange(1, head_n + 1, dtype=np.float64)
    total = float(np.sum(x ** -s))
    if n > head_n:
        a, b = float(head_n + 1), float(n)
        if s == 1.0:
            integral = math.log(b / a)
        else:
            integral = (b ** (1 - s) - a ** (1 - s)) / (1 - s)
        total += integral + (a ** -s + b ** -s) / 2 + s * (a ** (-s - 1) - b ** (-s - 1)) / 12
    return total


def zipf_overhead(s: float, max_freq: float, cap: float) -> float:
    """Storage of a stratified sample as a fraction of its source table, for a
    column whose rank-x value has frequency max_freq / x**s.

    The modeled column has floor(max_freq ** (1/s)) distinct values, so the
    rarest value has frequency 1.  Returns
    sum(min(cap, F(x))) / sum(F(x)) over the distinct values.
    """
    if s < 1.0:
        raise SampleError(f"Zipf exponent {s} must be >= 1")
    if not (max_freq >= cap >= 1):
        raise SampleError(f"need max_freq >= cap >= 1, got {max_freq}, {cap}")
    m = int(max_freq ** (1.0 / s))
    k_star = min(int((max_freq / cap) ** (1.0 / s)), m)
    total = max_freq * _power_sum(s, m)
    capped = cap * k_star + max_freq * (_power_sum(s, m) - _power_sum(s, k_star))
    return capped / total


# -- manifest serialization ---------------------------------------------------


def uniform_to_json(sample: UniformSample) -> dict:
    return {
        "table": sample.table,
        "schema": [[n, t] for n, t in sample.schema.columns],
        "p": sample.p,
        "seed": sample.seed,
        "source_rows": sample.source_rows,
        "row_count": sample.row_count,
        "blocks": _catalog._blocks_json(sample.blocks),
    }


def uniform_from_json(obj: dict, cat: Catalog, check_blocks) -> UniformSample:
    schema = Schema(tuple((n, t) for n, t in obj["schema"]))
    blocks = _catalog._blocks_from_json(obj["blocks"])
    check_blocks(blocks)
    data = read_blocks(cat.root, blocks, schema)
    return UniformSample(obj["table"], schema, obj["p"], obj["seed"], data,
                         obj["source_rows"], blocks)


def family_to_json(family: SampleFamily) -> dict:
    return {
        "table": family.table,
        "schema": [[n, t] for n, t in family.schema.columns],
        "phi": list(family.phi),
        "base_cap": family.base_cap,
        "ratio": family.ratio,
        "seed": family.seed,
        "ring_rows": list(family.ring_rows),
        "blocks": _catalog._blocks_json(family.blocks),
        "group_freq": {
            "keys": [list(k) for k in family.freq.keys],
            "counts": [int(c) for c in family.freq.counts],
        },
    }


def family_from_json(obj: dict, cat: Catalog, check_blocks) -> SampleFamily:
    schema = Schema(tuple((n, t) for n, t in obj["schema"]))
    phi = ColumnSet(tuple(obj["phi"]))
    blocks = _catalog._blocks_from_json(obj["blocks"])
    check_blocks(blocks)
    data = read_blocks(cat.root, blocks, schema)
    caps = level_caps(obj["base_cap"], obj["ratio"])
    m = len(caps)
    ring_rows = tuple(obj["ring_rows"])

    key_types = [schema.type_of(c) for c in phi]
    keys = [
        tuple(_catalog._json_value(v, t) for v, t in zip(k, key_types))
        for k in obj["group_freq"]["keys"]
    ]
    counts = np.asarray(obj["group_freq"]["counts"], dtype=np.int64)
    freq = FrequencyTable(tuple(phi), keys, counts)
    freq_by_key = {k: int(c) for k, c in zip(keys, counts)}

    n = sum(ring_rows)
    ranks = np.empty(n, dtype=np.int64)
    group_freq_of_row = np.empty(n, dtype=np.int64)
    start = 0
    for seg, size in enumerate(ring_rows):
        ring_level = m - 1 - seg  # physical order is innermost ring first
        base = caps[ring_level + 1] if ring_level + 1 < m else 0
        seg_cols = [data[c][start:start + size] for c in phi]
        if size:
            codes, seg_keys = group_codes(seg_cols)
            seg_counts = np.bincount(codes, minlength=len(seg_keys))
            # rows are phi-sorted inside a ring, so groups are contiguous and
            # the within-group ordinal recovers the permutation rank
            group_start = np.concatenate(([0], np.cumsum(seg_counts)))[codes]
            ranks[start:start + size] = base + (np.arange(size) - group_start)
            seg_freq = np.asarray([freq_by_key[k] for k in seg_keys], dtype=np.int64)
            group_freq_of_row[start:start + size] = seg_freq[codes]
        start += size

    return SampleFamily(obj["table"], schema, phi, obj["base_cap"], obj["ratio"],
                        obj["seed"], data, ranks, group_freq_of_row, freq,
                        ring_rows, blocks)
