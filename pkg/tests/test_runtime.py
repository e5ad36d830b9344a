import math

import numpy as np
import pytest

from straq import (
    ColumnSet,
    MissingSubgroupError,
    QueryError,
    SampleError,
    Schema,
    build_family,
    build_uniform,
    lemma_bound_check,
    parse,
    rewrite_disjunction,
    select_family,
)
from straq.query_ast import eval_predicate
from straq.runtime import (
    ReuseCache,
    build_error_profile,
    build_latency_profile,
    choose_error_level,
    choose_time_level,
    execute_with_reuse,
    finalize_estimates,
    readable_for,
)

from synthdata import add_skewed_table


@pytest.fixture
def stocked(catalog):
    """Catalog with one skewed table, two families, and a uniform sample."""
    handle, sizes = add_skewed_table(catalog, "t", 60_000, 50, seed=21)
    stats = catalog.compute_stats(handle, [("g",)])
    fam = build_family(handle, ColumnSet.of("g"), 256, 2, seed=3, stats=stats)
    catalog.add_family(fam)
    catalog.add_uniform(build_uniform(handle, 0.02, seed=5))
    return catalog, handle, fam, sizes


# -- family selection -----------------------------------------------------------


def test_select_family_prefers_fewest_columns(catalog):
    rng = np.random.default_rng(1)
    n = 5000
    handle = catalog.add_table(
        "t", Schema((("city", "integer"), ("genre", "integer"), ("v", "float"))),
        {"city": rng.integers(0, 8, n), "genre": rng.integers(0, 4, n),
         "v": rng.normal(size=n)})
    stats = catalog.compute_stats(handle, [("city",), ("city", "genre")])
    catalog.add_family(build_family(handle, ColumnSet.of("city"), 64, 2, 1, stats))
    catalog.add_family(build_family(handle, ColumnSet.of("city", "genre"), 64, 2, 1, stats))
    q = parse("SELECT COUNT(*) FROM t WHERE city = 3")
    sample, probes = select_family(q, catalog)
    assert sample.phi == ColumnSet.of("city")
    assert probes == []  # covering family found without probing


def test_select_family_probes_when_no_superset(stocked):
    catalog, handle, fam, _ = stocked
    # the uniform sample and the family are both probed; with no filter every
    # read row matches, so the ratio ties and the lexicographic id wins
    q = parse("SELECT AVG(v) FROM t WHERE v > -1e9")
    sample, probes = select_family(q, catalog)
    assert len(probes) == 2
    assert {p.sample_id for p in probes} == {fam.sample_id, "uniform:t"}
    assert sample is fam  # "family:..." sorts before "uniform:..."


def test_select_family_ratio_decides(catalog):
    # the query's columns {g, v} have no covering family, so both samples are
    # probed and the best selected/read ratio wins
    rng = np.random.default_rng(2)
    n = 40_000
    g = rng.integers(0, 1000, n)
    handle = catalog.add_table("t", Schema((("g", "integer"), ("v", "float"))),
                               {"g": g.astype(np.int64), "v": rng.normal(size=n)})
    stats = catalog.compute_stats(handle, [("g",)])
    fam = build_family(handle, ColumnSet.of("g"), 8, 2, seed=9, stats=stats)
    catalog.add_family(fam)
    catalog.add_uniform(build_uniform(handle, 0.5, seed=4))
    q = parse("SELECT COUNT(*) FROM t WHERE g = 17 AND v > -10")
    sample, probes = select_family(q, catalog)
    assert len(probes) == 2
    by_id = {p.sample_id: p for p in probes}
    chosen_id = readable_for(sample, catalog).sample_id
    assert by_id[chosen_id].ratio == max(p.ratio for p in probes)
    # the tiny stratified level holds ~8 of 1000 groups' worth of rows, so it
    # is far more selective per row read than the 50% uniform sample
    assert chosen_id == fam.sample_id


def test_select_family_uniform_only(catalog):
    handle, _ = add_skewed_table(catalog, "t", 5000, 10, seed=3)
    catalog.add_uniform(build_uniform(handle, 0.3, seed=2))
    q = parse("SELECT COUNT(*) FROM t WHERE g = 1")
    sample, probes = select_family(q, catalog)
    assert sample is catalog.uniforms["t"]


def test_select_family_no_samples(catalog):
    add_skewed_table(catalog, "t", 1000, 5, seed=1)
    with pytest.raises(QueryError, match="no samples"):
        select_family(parse("SELECT COUNT(*) FROM t"), catalog)


# -- disjunction rewrite ----------------------------------------------------------


def test_rewrite_single_conjunct_identity():
    q = parse("SELECT COUNT(*) FROM t WHERE a = 1 AND b = 2")
    assert rewrite_disjunction(q) == [q]


def test_rewrite_disjoint_predicates():
    q = parse("SELECT COUNT(*) FROM t WHERE a = 1 OR b = 2")
    subs = rewrite_disjunction(q)
    assert len(subs) == 2
    assert subs[0].predicate == ((q.predicate[0]),) == (q.predicate[0],)
    # second subquery: b = 2 AND NOT a = 1
    assert len(subs[1].predicate) == 1
    atoms = subs[1].predicate[0]
    assert {(a.column, a.op) for a in atoms} == {("b", "="), ("a", "!=")}


def test_rewrite_masks_partition_original(catalog):
    rng = np.random.default_rng(8)
    cols = {"a": rng.integers(0, 4, 2000).astype(np.int64),
            "b": rng.integers(0, 4, 2000).astype(np.int64)}
    q = parse("SELECT COUNT(*) FROM t WHERE a = 1 OR b = 2 OR a = 3 AND b = 0")
    subs = rewrite_disjunction(q)
    union = np.zeros(2000, dtype=bool)
    overlap = 0
    for sub in subs:
        mask = eval_predicate(sub.predicate, cols, 2000)
        overlap += int((union & mask).sum())
        union |= mask
    assert overlap == 0  # pairwise disjoint
    assert np.array_equal(union, eval_predicate(q.predicate, cols, 2000))


# -- profile level rules ------------------------------------------------------------


def test_choose_error_level_worked_example():
    caps = (100_000, 10_000, 1_000)
    # required 5000 at probe cap 1000 with 50 matches: threshold is 100000,
    # nothing strictly larger exists, so level 0 is chosen unguaranteed
    assert choose_error_level(caps, 5000, 1000, 50) == (0, False)
    # required 400: threshold 8000, the smallest larger cap is 10000
    assert choose_error_level(caps, 400, 1000, 50) == (1, True)


def test_choose_time_level_rules():
    caps = (100_000, 10_000, 1_000)
    assert choose_time_level(caps, math.inf, 1000, 1000) == (0, True)
    # budget 2e6 rows, probe read 1e4 at cap 1000 -> threshold 2e5: level 0
    assert choose_time_level(caps, 2e6, 1000, 10_000) == (0, True)
    # budget smaller than the smallest level -> floor with a flag
    assert choose_time_level(caps, 5, 1000, 10_000) == (2, False)


def test_error_profile_rule_fidelity(stocked):
    catalog, handle, fam, _ = stocked
    cache = ReuseCache()
    q = parse("SELECT AVG(v) FROM t WHERE g = 2 ERROR WITHIN 5%")
    profile, _ = build_error_profile(q, fam, q.bound, catalog, cache)
    caps = fam.caps
    threshold = profile.required_rows * (profile.probe_cap / profile.rows_matched)
    larger = [k for k in caps if k > threshold]
    want = min(larger) if larger else caps[0]
    assert profile.chosen_cap == want
    assert profile.probe_level == fam.level_count - 1
    dump = profile.dump()
    assert f"chosen_level: {profile.chosen_level}" in dump
    assert "rows_matched" in dump


def test_error_profile_exact_when_fully_capped(catalog):
    rng = np.random.default_rng(14)
    sizes = [1000, 2]  # group 1 is rarer than the smallest cap
    g = np.repeat(np.arange(2, dtype=np.int64), sizes)
    handle = catalog.add_table("e", Schema((("g", "integer"), ("v", "float"))),
                               {"g": g, "v": rng.normal(size=len(g))})
    stats = catalog.compute_stats(handle, [("g",)])
    fam = build_family(handle, ColumnSet.of("g"), 256, 2, seed=4, stats=stats)
    assert fam.caps[-1] >= sizes[1]
    q = parse("SELECT SUM(v) FROM e WHERE g = 1 ERROR WITHIN 1%")
    profile, _ = build_error_profile(q, fam, q.bound, catalog, ReuseCache())
    assert "exact" in profile.flags
    assert profile.chosen_level == fam.level_count - 1


def test_error_profile_missing_subgroup(stocked):
    catalog, *_ = stocked
    q = parse("SELECT SUM(v) FROM t WHERE g = 123456 ERROR WITHIN 5%")
    fam = catalog.families["t/g"]
    with pytest.raises(MissingSubgroupError):
        build_error_profile(q, fam, q.bound, catalog, ReuseCache())


def test_latency_profile_unbounded_time_takes_level0(stocked):
    catalog, handle, fam, _ = stocked
    q = parse("SELECT AVG(v) FROM t WHERE g = 1 WITHIN 1e9 SECONDS")
    profile, _ = build_latency_profile(q, fam, q.bound, catalog, ReuseCache())
    assert profile.chosen_level == 0
    assert profile.rate_rows_per_s > 0


def test_latency_profile_respects_budget(stocked):
    catalog, handle, fam, _ = stocked
    q = parse("SELECT AVG(v) FROM t WHERE g = 1 WITHIN 0.5 SECONDS")
    import time
    t0 = time.perf_counter()
    profile, _ = build_latency_profile(q, fam, q.bound, catalog, ReuseCache())
    result = execute_with_reuse(q, fam, profile.chosen_level, ReuseCache(), catalog)
    elapsed = time.perf_counter() - t0
    assert elapsed <= 0.6  # 1.2x the bound


# -- execution and reuse ---------------------------------------------------------------


def test_reuse_probe_then_escalate_bit_identical(stocked):
    catalog, handle, fam, _ = stocked
    q = parse("SELECT SUM(v), COUNT(*), AVG(v) FROM t WHERE v > 99 GROUP BY g")
    readable = readable_for(fam, catalog)
    cache = ReuseCache()
    probe = execute_with_reuse(q, readable, readable.level_count - 1, cache, catalog)
    escalated = execute_with_reuse(q, readable, 0, cache, catalog)
    assert set(probe.fresh_blocks).isdisjoint(escalated.fresh_blocks)
    cold = execute_with_reuse(q, readable, 0, None, catalog)
    assert cold.reads_by_freq == escalated.reads_by_freq
    assert set(cold.groups) == set(escalated.groups)
    for key in cold.groups:
        for f in cold.groups[key]:
            a, b = cold.groups[key][f], escalated.groups[key][f]
            assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    ea = finalize_estimates(cold, readable, q)
    eb = finalize_estimates(escalated, readable, q)
    for key in ea:
        for x, y in zip(ea[key], eb[key]):
            assert x.estimate == y.estimate and x.variance == y.variance


def test_reuse_randomized_interleavings(stocked):
    catalog, handle, fam, _ = stocked
    rng = np.random.default_rng(0)
    readable = readable_for(fam, catalog)
    for trial in range(10):
        lo = float(rng.uniform(95, 105))
        q = parse(f"SELECT SUM(v) FROM t WHERE v > {lo} GROUP BY g")
        cache = ReuseCache()
        levels = rng.permutation(readable.level_count)
        for lvl in levels:
            warm = execute_with_reuse(q, readable, int(lvl), cache, catalog)
            cold = execute_with_reuse(q, readable, int(lvl), None, catalog)
            assert cold.groups.keys() == warm.groups.keys()
            for key in cold.groups:
                for f in cold.groups[key]:
                    assert cold.groups[key][f][:3] == warm.groups[key][f][:3]


def test_cache_corruption_triggers_recompute(stocked):
    catalog, handle, fam, _ = stocked
    q = parse("SELECT COUNT(*) FROM t WHERE g = 0")
    readable = readable_for(fam, catalog)
    cache = ReuseCache()
    execute_with_reuse(q, readable, readable.level_count - 1, cache, catalog)
    key = next(iter(cache._store))
    cache._store[key].rows += 1  # corrupt the sealed partial
    again = execute_with_reuse(q, readable, readable.level_count - 1, cache, catalog)
    assert cache.corruption_events == 1
    assert again.total_matched() > 0


def test_execute_level_out_of_range(stocked):
    catalog, handle, fam, _ = stocked
    q = parse("SELECT COUNT(*) FROM t")
    with pytest.raises(SampleError):
        execute_with_reuse(q, fam, fam.level_count, None, catalog)


# -- lemma bounds -----------------------------------------------------------------------


def test_lemma_bounds_direct_substitution(catalog):
    handle, _ = add_skewed_table(catalog, "t", 30_000, 20, seed=2)
    stats = catalog.compute_stats(handle, [("g",)])
    fam = build_family(handle, ColumnSet.of("g"), 1000, 2, seed=1, stats=stats)
    chk = lemma_bound_check(fam, 100, "error")
    assert chk.bound == pytest.approx(2 + 1 / 100)
    assert chk.holds
    chk_t = lemma_bound_check(fam, 100, "time")
    assert chk_t.bound == pytest.approx(1 / math.sqrt(1 / 2 - 1 / 100))
    assert chk_t.holds
    # an exact cap hit gives factor 1 in both modes
    for mode in ("error", "time"):
        hit = lemma_bound_check(fam, fam.caps[2], mode)
        assert hit.k_prime == fam.caps[2] and hit.factor == 1.0
    with pytest.raises(SampleError):
        lemma_bound_check(fam, fam.caps[0] + 1, "error")


def test_lemma_sweep_power_of_two_caps(catalog):
    handle, _ = add_skewed_table(catalog, "t", 20_000, 10, seed=5)
    stats = catalog.compute_stats(handle, [("g",)])
    fam = build_family(handle, ColumnSet.of("g"), 1024, 2, seed=3, stats=stats)
    for k_opt in range(fam.caps[-1], fam.caps[0] + 1):
        for mode in ("error", "time"):
            assert lemma_bound_check(fam, k_opt, mode).holds


# -- disjunctive counts against a full-scan oracle ------------------------------------------


def test_disjunctive_count_matches_full_scan(catalog):
    from straq import run

    rng = np.random.default_rng(10)
    n = 4000
    a = rng.integers(0, 6, n).astype(np.int64)
    b = rng.integers(0, 6, n).astype(np.int64)
    handle = catalog.add_table("d", Schema((("a", "integer"), ("b", "integer"))),
                               {"a": a, "b": b})
    truth = int(((a == 1) | (b == 2)).sum())
    stats = catalog.compute_stats(handle, [("a",), ("b",)])
    hits = trials = 0
    for seed in range(300):
        catalog.families.clear()
        catalog.add_family(build_family(handle, ColumnSet.of("a"), 64, 2, seed, stats))
        catalog.add_family(build_family(handle, ColumnSet.of("b"), 64, 2, seed + 7, stats))
        res = run("SELECT COUNT(*) FROM d WHERE a = 1 OR b = 2 ERROR WITHIN 10%",
                  catalog, cache=ReuseCache())
        est = res.rows[0].estimate
        lo, hi = est.ci
        trials += 1
        hits += lo <= truth <= hi
    assert hits / trials >= 0.92
