"""Choosing which column sets to stratify on: query templates, candidate
generation, and the exact 0/1 solver with storage and drift constraints.

Run from the repository root:  python demos/03_workload_planning.py
"""

import tempfile
from pathlib import Path

import numpy as np

from straq import (
    Catalog,
    Schema,
    build_family,
    extract_templates,
    generate_candidates,
    parse,
    solve_plan,
)
from straq.optimizer import tail_length

workdir = Path(tempfile.mkdtemp(prefix="straq_demo_"))
catalog = Catalog(workdir / "catalog")

# Five columns; city and url are heavily skewed, genre and os are uniform.
rng = np.random.default_rng(3)
n = 100_000
city = rng.zipf(1.5, n).clip(max=500).astype(np.int64)
url = rng.zipf(1.3, n).clip(max=2000).astype(np.int64)
genre = rng.integers(0, 8, n)
os_col = rng.integers(0, 5, n)
table = catalog.add_table(
    "sessions",
    Schema((("city", "integer"), ("genre", "integer"), ("os", "integer"),
            ("url", "integer"), ("time", "float"))),
    {"city": city, "genre": genre, "os": os_col, "url": url,
     "time": rng.exponential(120, n)})

# A query log stands in for the historical workload; templates are the
# distinct WHERE/GROUP BY column sets with their relative frequencies.
log = (
    [parse("SELECT COUNT(*) FROM sessions WHERE city = 7")] * 30
    + [parse("SELECT AVG(time) FROM sessions WHERE genre = 2 AND city = 7")] * 25
    + [parse("SELECT AVG(time) FROM sessions WHERE os = 1 AND url = 3")] * 25
    + [parse("SELECT COUNT(*) FROM sessions GROUP BY genre")] * 20
)
profile = extract_templates(log)
print("templates (columns, weight):")
for t in profile.templates:
    print(f"  {str(t.phi):<12} {t.weight:.2f}")

base_cap = 1000
candidates = generate_candidates(profile, catalog, table, base_cap, max_cols=2)
print("\ncandidates (tail = distinct values rarer than the cap):")
for c in candidates:
    print(f"  {str(c.phi):<12} tail={c.tail:<5} distinct={c.distinct:<6} "
          f"store={c.store}")

stats = catalog.compute_stats(table, [tuple(t.phi) for t in profile.templates])
tails = [tail_length(stats, t.phi, base_cap) for t in profile.templates]
dists = [stats.distinct(tuple(t.phi)) for t in profile.templates]

for budget_frac in (0.05, 0.2, 0.5):
    budget = int(budget_frac * table.row_count)
    plan = solve_plan(candidates, profile, budget, drift=1.0,
                      template_tails=tails, template_distincts=dists,
                      mode="exact", table="sessions", base_cap=base_cap)
    chosen = ", ".join(str(p) for p in plan.chosen_sets()) or "(nothing)"
    print(f"\nbudget {budget_frac:.0%} ({budget} rows): chose {chosen}")
    print(f"  objective G = {plan.objective:.2f}, "
          f"used {plan.budget_used}/{plan.budget_rows} rows")
    for t, y in zip(plan.templates, plan.coverages):
        print(f"  coverage of {str(t.phi):<12} = {y:.2f}")

# Replanning with a drift limit: at most 30% of the existing sample storage
# may be created or discarded, so the plan stays close to what is built.
plan = solve_plan(candidates, profile, int(0.2 * n), drift=1.0,
                  template_tails=tails, template_distincts=dists,
                  mode="exact", table="sessions", base_cap=base_cap)
for phi in plan.chosen_sets():
    catalog.add_family(build_family(table, phi, base_cap, 2, 1, stats))
candidates2 = generate_candidates(profile, catalog, table, base_cap, max_cols=2)
replanned = solve_plan(candidates2, profile, int(0.5 * n), drift=0.3,
                       template_tails=tails, template_distincts=dists,
                       mode="exact", table="sessions", base_cap=base_cap)
print(f"\nreplanned at 50% budget with drift 0.3: "
      f"{', '.join(str(p) for p in replanned.chosen_sets())}")
print("existing families kept:",
      all(z for c, z in zip(replanned.candidates, replanned.chosen) if c.exists))
