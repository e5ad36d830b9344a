"""Table ingest, column statistics, block storage, and the catalog manifest.

Tables and samples are persisted in a columnar block layout: fixed-size
blocks of BLOCK_ROWS rows (the last block of a segment may be ragged), one
``.npz`` file per block with one array per column.  Block files are immutable
once written.  The catalog itself is single-writer / multi-reader: mutations
take the writer lock, readers work on immutable handles.
"""

from __future__ import annotations

import csv
import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DuplicateTableError, ManifestError, SchemaError

BLOCK_ROWS = 65_536

MANIFEST_NAME = "manifest.straq"
MANIFEST_VERSION = 1

COLUMN_TYPES = ("integer", "float", "string")

_DTYPES = {"integer": np.int64, "float": np.float64}


def _coerce(value: str, ctype: str, line_no: int):
    try:
        if ctype == "integer":
            return int(value)
        if ctype == "float":
            return float(value)
        return value
    except ValueError:
        raise SchemaError(
            f"line {line_no}: cannot coerce {value!r} to {ctype}"
        ) from None


def _column_array(values: list, ctype: str) -> np.ndarray:
    if ctype == "string":
        return np.asarray(values, dtype=np.str_)
    return np.asarray(values, dtype=_DTYPES[ctype])


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class Schema:
    """Ordered column names and types (integer | float | string)."""

    columns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        names = [n for n, _ in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column name in schema")
        for name, ctype in self.columns:
            if ctype not in COLUMN_TYPES:
                raise SchemaError(f"unknown column type {ctype!r} for {name!r}")

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Parse a ``name:type,name:type`` schema string."""
        cols = []
        for part in text.split(","):
            name, _, ctype = part.strip().partition(":")
            cols.append((name.strip(), ctype.strip()))
        return cls(tuple(cols))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.columns)

    def type_of(self, name: str) -> str:
        for n, t in self.columns:
            if n == name:
                return t
        raise SchemaError(f"unknown column {name!r}")

    def __len__(self):
        return len(self.columns)


@dataclass(frozen=True)
class BlockRef:
    """One immutable block of rows: [row_start, row_stop) at ``path``."""

    block_id: int
    row_start: int
    row_stop: int
    path: str  # relative to the catalog root
    checksum: str

    @property
    def row_count(self) -> int:
        return self.row_stop - self.row_start


class TableHandle:
    """An ingested table: schema, row count, and its ordered blocks."""

    def __init__(self, name: str, schema: Schema, blocks: Sequence[BlockRef],
                 row_count: int, root: Path):
        self.name = name
        self.schema = schema
        self.blocks = list(blocks)
        self.row_count = row_count
        self._root = root
        self._cache: dict[str, np.ndarray] | None = None

    def columns(self) -> dict[str, np.ndarray]:
        """All column arrays, loaded from blocks once and cached."""
        if self._cache is None:
            self._cache = read_blocks(self._root, self.blocks, self.schema)
        return self._cache

    def read_blocks_from_disk(self) -> dict[str, np.ndarray]:
        """Re-read every block from disk, bypassing the cache."""
        return read_blocks(self._root, self.blocks, self.schema)


@dataclass
class FrequencyTable:
    """Exact frequency histogram of a column set: sorted keys and counts."""

    columns: tuple[str, ...]
    keys: list[tuple]
    counts: np.ndarray

    @property
    def distinct(self) -> int:
        return len(self.keys)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) if len(self.counts) else 0

    def as_dict(self) -> dict[tuple, int]:
        return {k: int(c) for k, c in zip(self.keys, self.counts)}


@dataclass
class ColumnStats:
    """Per-column-set statistics for one table (histograms are exact)."""

    table: str
    avg_row_bytes: float
    frequencies: dict[tuple[str, ...], FrequencyTable] = field(default_factory=dict)

    def freq(self, columns: Sequence[str]) -> FrequencyTable:
        return self.frequencies[tuple(columns)]

    def distinct(self, columns: Sequence[str]) -> int:
        return self.freq(columns).distinct


def group_codes(cols: list[np.ndarray]) -> tuple[np.ndarray, list[tuple]]:
    """Encode row tuples over ``cols`` as dense int64 group codes.

    Codes order groups lexicographically by column order; returns the codes
    per row and the sorted list of group-key tuples.
    """
    n = len(cols[0])
    if n == 0:
        return np.zeros(0, dtype=np.int64), []
    uniques, inverses = [], []
    for col in cols:
        u, inv = np.unique(col, return_inverse=True)
        uniques.append(u)
        inverses.append(inv.astype(np.int64))
    codes = inverses[0]
    for u, inv in zip(uniques[1:], inverses[1:]):
        codes = codes * len(u) + inv
    present, codes = np.unique(codes, return_inverse=True)
    keys = []
    for code in present:
        key = []
        for u in reversed(uniques):
            code, digit = divmod(int(code), len(u))
            key.append(u[digit].item())
        keys.append(tuple(reversed(key)))
    return codes.astype(np.int64), keys


class Catalog:
    """All engine state under one root directory.

    Holds tables, their stats, uniform samples, stratified sample families,
    and the active sample plan.  Mutations go through the writer lock; block
    files are written once and never modified.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.tables: dict[str, TableHandle] = {}
        self.stats: dict[str, ColumnStats] = {}
        self.families: dict[str, object] = {}  # family_id -> SampleFamily
        self.uniforms: dict[str, object] = {}  # table -> UniformSample
        self.plan = None
        self._lock = threading.RLock()

    # -- ingest ---------------------------------------------------------

    def ingest_csv(self, path: str | Path, name: str, schema: Schema | str) -> TableHandle:
        """Ingest an RFC-4180 CSV (header row required) into blocks."""
        if isinstance(schema, str):
            schema = Schema.parse(schema)
        with self._lock:
            if name in self.tables:
                raise DuplicateTableError(f"table {name!r} already ingested")
            with open(path, "r", newline="", encoding="utf-8") as f:
                reader = csv.reader(f)
                try:
                    header = next(reader)
                except StopIteration:
                    raise SchemaError("missing header row") from None
                if len(header) != len(schema):
                    raise SchemaError(
                        f"header has {len(header)} columns, schema has {len(schema)}"
                    )
                columns: list[list] = [[] for _ in schema.columns]
                for line_no, record in enumerate(reader, start=2):
                    if len(record) != len(schema):
                        raise SchemaError(
                            f"line {line_no}: expected {len(schema)} fields, got {len(record)}"
                        )
                    for i, (raw, (_, ctype)) in enumerate(zip(record, schema.columns)):
                        columns[i].append(_coerce(raw, ctype, line_no))
            arrays = {
                cname: _column_array(vals, ctype)
                for vals, (cname, ctype) in zip(columns, schema.columns)
            }
            return self._register_table(name, schema, arrays)

    def add_table(self, name: str, schema: Schema, arrays: dict[str, np.ndarray]) -> TableHandle:
        """Register an in-memory table (same block layout as ingest_csv)."""
        with self._lock:
            if name in self.tables:
                raise DuplicateTableError(f"table {name!r} already ingested")
            return self._register_table(name, schema, dict(arrays))

    def _register_table(self, name, schema, arrays) -> TableHandle:
        n = len(next(iter(arrays.values()))) if arrays else 0
        blocks = write_blocks(self.root, f"blocks/{name}", arrays, schema, n)
        handle = TableHandle(name, schema, blocks, n, self.root)
        handle._cache = arrays
        self.tables[name] = handle
        return handle

    # -- statistics -----------------------------------------------------

    def compute_stats(self, table: TableHandle | str,
                      column_sets: Iterable[Sequence[str]]) -> ColumnStats:
        """Exact frequency histograms and distinct counts for each column set.

        Idempotent and deterministic; results are cached on the catalog.
        """
        handle = self.tables[table] if isinstance(table, str) else table
        stats = self.stats.get(handle.name)
        if stats is None:
            total_bytes = sum(
                (self.root / b.path).stat().st_size for b in handle.blocks
            )
            stats = ColumnStats(
                table=handle.name,
                avg_row_bytes=(total_bytes / handle.row_count) if handle.row_count else 0.0,
            )
            self.stats[handle.name] = stats
        data = handle.columns()
        for cols in column_sets:
            key = tuple(cols)
            if key in stats.frequencies:
                continue
            for c in key:
                if c not in handle.schema.names:
                    raise SchemaError(f"unknown column {c!r} in table {handle.name!r}")
            codes, keys = group_codes([data[c] for c in key])
            counts = np.bincount(codes, minlength=len(keys)).astype(np.int64)
            stats.frequencies[key] = FrequencyTable(key, keys, counts)
        return stats

    # -- samples and plan -----------------------------------------------

    def add_family(self, family) -> None:
        with self._lock:
            family.persist(self)
            self.families[family.family_id] = family

    def swap_family(self, family) -> None:
        """Atomically replace the family with the same id (refresh path)."""
        with self._lock:
            family.persist(self)
            self.families[family.family_id] = family

    def add_uniform(self, sample) -> None:
        with self._lock:
            sample.persist(self)
            self.uniforms[sample.table] = sample

    def set_plan(self, plan) -> None:
        with self._lock:
            self.plan = plan


# -- block I/O ------------------------------------------------------------


def write_blocks(root: Path, subdir: str, arrays: dict[str, np.ndarray],
                 schema: Schema, row_count: int,
                 start_block_id: int = 0) -> list[BlockRef]:
    """Write columns to fixed-size npz blocks under ``root/subdir``."""
    out_dir = root / subdir
    out_dir.mkdir(parents=True, exist_ok=True)
    blocks: list[BlockRef] = []
    for start in range(0, row_count, BLOCK_ROWS):
        stop = min(start + BLOCK_ROWS, row_count)
        block_id = start_block_id + len(blocks)
        rel = f"{subdir}/b{block_id:06d}.npz"
        payload = {
            f"c{i}": arrays[name][start:stop]
            for i, name in enumerate(schema.names)
        }
        with open(root / rel, "wb") as f:
            np.savez(f, **payload)
        blocks.append(BlockRef(block_id, start, stop, rel, file_sha256(root / rel)))
    return blocks


def read_blocks(root: Path, blocks: Sequence[BlockRef], schema: Schema) -> dict[str, np.ndarray]:
    parts: dict[str, list[np.ndarray]] = {name: [] for name in schema.names}
    for ref in blocks:
        with np.load(root / ref.path) as z:
            for i, name in enumerate(schema.names):
                parts[name].append(z[f"c{i}"])
    out = {}
    for name, ctype in schema.columns:
        if parts[name]:
            out[name] = np.concatenate(parts[name])
        else:
            out[name] = _column_array([], ctype)
    return out


# -- manifest -------------------------------------------------------------


def _schema_json(schema: Schema):
    return [[n, t] for n, t in schema.columns]


def _blocks_json(blocks: Sequence[BlockRef]):
    return [
        {"id": b.block_id, "start": b.row_start, "stop": b.row_stop,
         "path": b.path, "sha256": b.checksum}
        for b in blocks
    ]


def _blocks_from_json(items) -> list[BlockRef]:
    return [
        BlockRef(it["id"], it["start"], it["stop"], it["path"], it["sha256"])
        for it in items
    ]


def _stats_json(stats: ColumnStats):
    return {
        "avg_row_bytes": stats.avg_row_bytes,
        "frequencies": [
            {
                "columns": list(ft.columns),
                "keys": [list(k) for k in ft.keys],
                "counts": [int(c) for c in ft.counts],
            }
            for ft in stats.frequencies.values()
        ],
    }


def _stats_from_json(table: str, obj, schema: Schema) -> ColumnStats:
    stats = ColumnStats(table=table, avg_row_bytes=obj["avg_row_bytes"])
    for entry in obj["frequencies"]:
        cols = tuple(entry["columns"])
        keys = [
            tuple(_json_value(v, schema.type_of(c)) for v, c in zip(k, cols))
            for k in entry["keys"]
        ]
        counts = np.asarray(entry["counts"], dtype=np.int64)
        stats.frequencies[cols] = FrequencyTable(cols, keys, counts)
    return stats


def _json_value(v, ctype: str):
    if ctype == "integer":
        return int(v)
    if ctype == "float":
        return float(v)
    return v


def persist_manifest(catalog: Catalog, path: str | Path | None = None) -> Path:
    """Write the catalog manifest: a versioned header line, then one JSON
    document with a stanza per table, sample, and the active plan."""
    from . import optimizer, sampling  # deferred: avoids an import cycle

    path = Path(path) if path is not None else catalog.root / MANIFEST_NAME
    doc = {
        "tables": [
            {
                "name": t.name,
                "schema": _schema_json(t.schema),
                "row_count": t.row_count,
                "blocks": _blocks_json(t.blocks),
                "stats": _stats_json(catalog.stats[t.name]) if t.name in catalog.stats else None,
            }
            for t in sorted(catalog.tables.values(), key=lambda t: t.name)
        ],
        "uniforms": [
            sampling.uniform_to_json(s)
            for _, s in sorted(catalog.uniforms.items())
        ],
        "families": [
            sampling.family_to_json(f)
            for _, f in sorted(catalog.families.items())
        ],
        "plan": optimizer.plan_to_json(catalog.plan) if catalog.plan is not None else None,
    }
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(f"straq-manifest {MANIFEST_VERSION}\n")
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    tmp.replace(path)
    return path


def load_manifest(path: str | Path) -> Catalog:
    """Load a catalog back from its manifest; verifies every block file."""
    from . import optimizer, sampling  # deferred: avoids an import cycle

    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        body = f.read()
    parts = header.split()
    if len(parts) != 2 or parts[0] != "straq-manifest":
        raise ManifestError(f"not a straq manifest: {header!r}")
    if int(parts[1]) != MANIFEST_VERSION:
        raise ManifestError(
            f"manifest version {parts[1]} not supported (want {MANIFEST_VERSION})"
        )
    doc = json.loads(body)
    catalog = Catalog(path.parent)

    def check_blocks(blocks: list[BlockRef]):
        for b in blocks:
            p = catalog.root / b.path
            if not p.exists():
                raise ManifestError(f"missing block file {b.path}")
            actual = file_sha256(p)
            if actual != b.checksum:
                raise ManifestError(f"checksum failure for block {b.path}")

    for entry in doc["tables"]:
        schema = Schema(tuple((n, t) for n, t in entry["schema"]))
        blocks = _blocks_from_json(entry["blocks"])
        check_blocks(blocks)
        handle = TableHandle(entry["name"], schema, blocks, entry["row_count"], catalog.root)
        catalog.tables[entry["name"]] = handle
        if entry["stats"] is not None:
            catalog.stats[entry["name"]] = _stats_from_json(entry["name"], entry["stats"], schema)
    for entry in doc["uniforms"]:
        sample = sampling.uniform_from_json(entry, catalog, check_blocks)
        catalog.uniforms[sample.table] = sample
    for entry in doc["families"]:
        family = sampling.family_from_json(entry, catalog, check_blocks)
        catalog.families[family.family_id] = family
    if doc.get("plan") is not None:
        catalog.plan = optimizer.plan_from_json(doc["plan"])
    return catalog
