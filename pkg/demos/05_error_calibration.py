"""Are the error bars honest? A calibration experiment: confidence intervals
from uniform and stratified samples against ground truth, and requested
error bounds against measured errors.

Run from the repository root:  python demos/05_error_calibration.py
"""

import tempfile
from pathlib import Path

import numpy as np

from straq import (
    AggregateSpec,
    Catalog,
    ColumnSet,
    Schema,
    StratumSummary,
    build_family,
    estimate,
    run,
)
from straq.runtime import ReuseCache

workdir = Path(tempfile.mkdtemp(prefix="straq_demo_"))
catalog = Catalog(workdir / "catalog")

rng = np.random.default_rng(23)
sizes = np.maximum((400_000 / np.arange(1, 300) ** 1.3).astype(int), 1)
g = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
n = len(g)
v = rng.lognormal(3.0, 0.6, n)
table = catalog.add_table("t", Schema((("g", "integer"), ("v", "float"))),
                          {"g": g, "v": v})
stats = catalog.compute_stats(table, [("g",)])

print("=== CI coverage from repeated uniform samples ===")
truth = float(v.mean())
spec = AggregateSpec("avg", target="v")
trials, hits = 400, 0
for seed in range(trials):
    srng = np.random.default_rng(seed)
    idx = srng.integers(0, n, size=800)
    sample = v[idx]
    stratum = StratumSummary(weight=n / 800, rows_read=800, matched=800,
                             sum_y=float(sample.sum()),
                             sum_sq=float((sample ** 2).sum()))
    est = estimate(spec, [stratum], n, 0.95, uniform=True)
    lo, hi = est.ci
    hits += lo <= truth <= hi
print(f"95% CI for AVG contained the truth in {hits}/{trials} trials "
      f"({hits / trials:.1%})")

print("\n=== CI coverage from repeated stratified families ===")
spec_sum = AggregateSpec("sum", target="v")
truth_sum = float(v.sum())
trials, hits = 200, 0
for seed in range(trials):
    fam = build_family(table, ColumnSet.of("g"), 64, 2, seed, stats)
    freq = fam.group_freq_of_row
    weights = np.where(freq > 64, freq / 64.0, 1.0)
    strata = []
    for w in np.unique(weights):
        mask = weights == w
        vals = fam.data["v"][mask]
        strata.append(StratumSummary(weight=float(w), rows_read=int(mask.sum()),
                                     matched=int(mask.sum()),
                                     sum_y=float(vals.sum()),
                                     sum_sq=float((vals ** 2).sum())))
    est = estimate(spec_sum, strata, n, 0.95)
    lo, hi = est.ci
    hits += lo <= truth_sum <= hi
print(f"95% CI for SUM contained the truth in {hits}/{trials} fresh families "
      f"({hits / trials:.1%})")

print("\n=== requested vs measured error through the full engine ===")
fam = build_family(table, ColumnSet.of("g"), 4096, 2, seed=1, stats=stats)
catalog.add_family(fam)
cache = ReuseCache()
print("bound   measured (20 queries each)")
for eps in (2, 8, 32):
    measured = []
    for gid in range(10, 30):
        res = run(f"SELECT AVG(v) FROM t WHERE g = {gid} ERROR WITHIN {eps}%",
                  catalog, cache=cache)
        est = res.rows[0].estimate.estimate
        true_avg = float(v[g == gid].mean())
        measured.append(abs(est - true_avg) / true_avg)
    within = sum(m <= eps / 100 for m in measured)
    print(f"{eps:>4}%   max {max(measured):.4f}, "
          f"within bound {within}/{len(measured)}")
