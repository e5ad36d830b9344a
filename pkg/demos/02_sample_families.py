"""Multi-resolution stratified sample families: nested levels, per-row
effective rates, and the storage-overhead calculator for skewed data.

Run from the repository root:  python demos/02_sample_families.py
"""

import tempfile
from pathlib import Path

import numpy as np

from straq import (
    Catalog,
    ColumnSet,
    Schema,
    build_family,
    family_store_cost,
    sample_at_level,
    zipf_overhead,
)

workdir = Path(tempfile.mkdtemp(prefix="straq_demo_"))
catalog = Catalog(workdir / "catalog")

# A table whose group sizes follow a power law: a few huge groups, a long
# tail of rare ones. This is the regime where stratification pays off.
rng = np.random.default_rng(7)
sizes = np.maximum((20_000 / np.arange(1, 200) ** 1.4).astype(int), 1)
g = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
v = rng.normal(100, 15, len(g))
table = catalog.add_table("events", Schema((("g", "integer"), ("v", "float"))),
                          {"g": g, "v": v})
stats = catalog.compute_stats(table, [("g",)])
print(f"{table.row_count} rows, {len(sizes)} groups, "
      f"largest {sizes.max()}, smallest {sizes.min()}")

# A family on g with base cap 256 halving per level. Only the largest sample
# is materialized; every smaller level is a rank-filtered view of it.
family = build_family(table, ColumnSet.of("g"), base_cap=256, ratio=2,
                      seed=42, stats=stats)
print(f"\nfamily caps: {family.caps}")
print(f"stored rows: {family.store_rows} "
      f"({family.store_rows / table.row_count:.1%} of the table)")
print(f"analytic cost at cap 256: "
      f"{family_store_cost(ColumnSet.of('g'), 256, stats)} rows")

print("\nlevel  cap  rows   rarest-group rate  biggest-group rate")
for level in range(family.level_count):
    view = sample_at_level(family, level)
    rates = view.rates
    print(f"{level:>5}  {view.cap:>4} {view.row_count:>6}"
          f"  {rates.max():>17.3f}  {rates.min():>18.5f}")

# Nesting is structural: each level is a prefix of the stored row order, so
# escalating a query to a bigger level only touches new blocks.
for level in range(family.level_count - 1):
    assert family.level_rows(level) >= family.level_rows(level + 1)
print("\nnesting holds: every level is a prefix of the next larger one")

# The storage overhead of a single stratified sample under a Zipf frequency
# model, as a fraction of the original table.
print("\nZipf storage overhead (highest frequency 1e9):")
print("   s     cap=1e4   cap=1e5   cap=1e6")
for s in (1.2, 1.5, 2.0):
    ratios = [zipf_overhead(s, 1e9, cap) for cap in (1e4, 1e5, 1e6)]
    print(f"  {s:.1f}   " + "   ".join(f"{r:7.4f}" for r in ratios))
