"""Answering queries under error and time bounds: probing, the error-latency
profile, block-level reuse, and disjunctive predicates.

Run from the repository root:  python demos/04_bounded_queries.py
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from straq import (
    Catalog,
    ColumnSet,
    Schema,
    build_family,
    build_uniform,
    run,
)
from straq.runtime import ReuseCache

workdir = Path(tempfile.mkdtemp(prefix="straq_demo_"))
catalog = Catalog(workdir / "catalog")

rng = np.random.default_rng(11)
sizes = np.maximum((3_000_000 / np.arange(1, 800) ** 1.2).astype(int), 1)
g = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
n = len(g)
v = rng.normal(100, 20, n) + g * 0.05
perm = rng.permutation(n)
table = catalog.add_table("events", Schema((("g", "integer"), ("v", "float"))),
                          {"g": g[perm], "v": v[perm]})
stats = catalog.compute_stats(table, [("g",)])
family = build_family(table, ColumnSet.of("g"), 50_000, 2, seed=5, stats=stats)
catalog.add_family(family)
catalog.add_uniform(build_uniform(table, 0.01, seed=6))
print(f"{n} rows, family caps {family.caps[:4]}...{family.caps[-1]}, "
      f"store {family.store_rows / n:.1%} of the table\n")

cache = ReuseCache()
truth = float(v[g == 40].mean())

print("=== error-bounded query ===")
for eps in (10, 2):
    t0 = time.perf_counter()
    res = run(f"SELECT AVG(v) FROM events WHERE g = 40 ERROR WITHIN {eps}%",
              catalog, cache=cache)
    elapsed = time.perf_counter() - t0
    est = res.rows[0].estimate
    print(f"bound {eps:>2}%: estimate {est.estimate:8.3f} "
          f"+-{est.half_width:6.3f}  (truth {truth:.3f})  "
          f"n={est.n:<6} {elapsed * 1000:6.1f} ms")
print("the profile picked the level:")
print("  " + res.profile.dump().replace("\n", "\n  "))

print("\n=== time-bounded query ===")
for bound in (0.05, 0.5):
    t0 = time.perf_counter()
    res = run(f"SELECT AVG(v), RELATIVE ERROR AT 95 FROM events "
              f"WHERE g = 40 WITHIN {bound} SECONDS", catalog, cache=ReuseCache())
    elapsed = time.perf_counter() - t0
    est = res.rows[0].estimate
    rel = res.rows[0].relative_errors[0][1]
    print(f"bound {bound:4.2f}s: finished in {elapsed:.3f}s, "
          f"estimate {est.estimate:.3f}, relative error at 95%: {rel:.4f}")

print("\n=== reuse across escalation ===")
cache = ReuseCache()
run("SELECT SUM(v) FROM events WHERE g < 50 ERROR WITHIN 32%", catalog, cache=cache)
before = (cache.hits, cache.misses)
run("SELECT SUM(v) FROM events WHERE g < 50 ERROR WITHIN 2%", catalog, cache=cache)
after = (cache.hits, cache.misses)
print(f"cache after the loose bound: hits={before[0]}, misses={before[1]}")
print(f"after tightening to 2%:      hits={after[0]}, misses={after[1]}")
print("the tighter run recomputed only blocks the probe had not seen")

print("\n=== rare group: exact answers from the sample ===")
rare = len(sizes) - 1
res = run(f"SELECT SUM(v) FROM events WHERE g = {rare} ERROR WITHIN 1%",
          catalog, cache=ReuseCache())
est = res.rows[0].estimate
print(f"group {rare} has {sizes[rare]} rows, below every cap: "
      f"estimate {est.estimate:.4f}, exact={est.exact}, "
      f"interval width {est.half_width}")

print("\n=== disjunctive predicate ===")
res = run("SELECT COUNT(*) FROM events WHERE g = 3 OR v > 160 ERROR WITHIN 10%",
          catalog, cache=ReuseCache())
est = res.rows[0].estimate
truth = int(((g == 3) | (v > 160)).sum())
print(f"estimate {est.estimate:.0f} +-{est.half_width:.0f} (truth {truth})")

print("\n=== grouped output ===")
res = run("SELECT AVG(v) FROM events WHERE g < 5 GROUP BY g ERROR WITHIN 5%",
          catalog, cache=ReuseCache())
print(res.format())
