import math
import threading

import numpy as np
import pytest

from straq import (
    ColumnSet,
    SampleError,
    Schema,
    build_family,
    build_uniform,
    family_store_cost,
    refresh_family,
    sample_at_level,
    zipf_overhead,
)
from straq.sampling import level_caps


def small_table(catalog, sizes, seed=0, name="t"):
    rng = np.random.default_rng(seed)
    g = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
    v = rng.normal(size=len(g))
    perm = rng.permutation(len(g))
    handle = catalog.add_table(name, Schema((("g", "integer"), ("v", "float"))),
                               {"g": g[perm], "v": v[perm]})
    stats = catalog.compute_stats(handle, [("g",)])
    return handle, stats


# -- uniform samples ---------------------------------------------------------


def test_uniform_p1_is_identity(catalog, sessions):
    s = build_uniform(sessions, 1.0, seed=1)
    assert s.row_count == sessions.row_count
    assert np.array_equal(s.data["URL"], sessions.columns()["URL"])
    assert s.rate == 1.0


def test_uniform_scale_factor(catalog, sessions):
    # downstream weighting for p=0.4 is 1/0.4 = 2.5 exactly
    from straq.runtime import readable_for
    sample = build_uniform(sessions, 0.4, seed=2)
    readable = readable_for(sample, catalog)
    assert readable.weight_of(0, 0) == 2.5


def test_uniform_p_out_of_range(catalog, sessions):
    for p in (0.0, -0.1, 1.5):
        with pytest.raises(SampleError):
            build_uniform(sessions, p, seed=1)


def test_uniform_size_within_binomial_bound(catalog):
    n, p = 100_000, 0.5
    t = catalog.add_table("u", Schema((("x", "integer"),)),
                          {"x": np.arange(n, dtype=np.int64)})
    s = build_uniform(t, p, seed=123)
    bound = 3 * math.sqrt(n * p * (1 - p))
    assert abs(s.row_count - n * p) <= bound


def test_uniform_determinism(catalog, sessions):
    a = build_uniform(sessions, 0.5, seed=42)
    b = build_uniform(sessions, 0.5, seed=42)
    assert np.array_equal(a.data["URL"], b.data["URL"])


def test_uniform_unbiasedness(catalog):
    # over 500 seeds the mean of size/p stays within 3 standard errors of N
    n, p, seeds = 2_000, 0.3, 500
    t = catalog.add_table("b", Schema((("x", "integer"),)),
                          {"x": np.arange(n, dtype=np.int64)})
    totals = [build_uniform(t, p, seed=s).row_count / p for s in range(seeds)]
    se = math.sqrt(n * (1 - p) / p / seeds)
    assert abs(np.mean(totals) - n) <= 3 * se


# -- sample families -----------------------------------------------------------


def test_level_caps_examples():
    caps = level_caps(100_000, 2)
    assert len(caps) == 16
    assert caps[:3] == (100_000, 50_000, 25_000)
    assert caps[-1] == 3
    assert level_caps(1, 2) == (1,)  # single-level family
    with pytest.raises(SampleError):
        level_caps(0, 2)
    with pytest.raises(SampleError):
        level_caps(8, 1)


def test_family_on_sessions_cap1(catalog, sessions):
    stats = catalog.compute_stats(sessions, [("Browser",)])
    fam = build_family(sessions, ColumnSet.of("Browser"), 1, 2, seed=0, stats=stats)
    assert fam.caps == (1,)
    level = sample_at_level(fam, 0)
    counts = level.group_row_counts()
    assert counts == {("Firefox",): 1, ("IE",): 1, ("Safari",): 1}
    rates = {b: r for b, r in zip(level.column("Browser"), level.rates)}
    assert rates["Firefox"] == pytest.approx(1 / 3)
    assert rates["IE"] == 1.0 and rates["Safari"] == 1.0


def test_family_no_truncation(catalog, sessions):
    stats = catalog.compute_stats(sessions, [("Browser",)])
    fam = build_family(sessions, ColumnSet.of("Browser"), 8, 2, seed=5, stats=stats)
    level = sample_at_level(fam, 0)
    assert level.row_count == sessions.row_count
    assert np.all(level.rates == 1.0)
    # each resolution increment is stored sorted by phi
    col = fam.data["Browser"]
    start = 0
    for size in fam.ring_rows:
        ring = col[start:start + size].tolist()
        assert ring == sorted(ring)
        start += size


def test_family_structure(catalog):
    handle, stats = small_table(catalog, [400] * 20, seed=3)
    fam = build_family(handle, ColumnSet.of("g"), 128, 2, seed=11, stats=stats)
    assert fam.caps == (128, 64, 32, 16, 8, 4, 2)
    freqs = stats.freq(("g",)).as_dict()
    for lvl in range(fam.level_count):
        counts = sample_at_level(fam, lvl).group_row_counts()
        for key, f in freqs.items():
            assert counts.get(key, 0) == min(fam.caps[lvl], f)
        rates = sample_at_level(fam, lvl).rates
        freq_rows = fam.group_freq_of_row[: fam.level_rows(lvl)]
        assert np.array_equal(rates, np.minimum(1.0, fam.caps[lvl] / freq_rows))


def test_level_views_share_storage(catalog):
    handle, stats = small_table(catalog, [50, 60, 70], seed=1)
    fam = build_family(handle, ColumnSet.of("g"), 16, 2, seed=2, stats=stats)
    for lvl in range(fam.level_count):
        view = sample_at_level(fam, lvl)
        assert np.shares_memory(view.column("v"), fam.data["v"])


def test_level_nesting(catalog):
    handle, stats = small_table(catalog, [100, 10, 3], seed=8)
    fam = build_family(handle, ColumnSet.of("g"), 32, 2, seed=4, stats=stats)
    prev: set | None = None
    for lvl in range(fam.level_count - 1, -1, -1):
        view = sample_at_level(fam, lvl)
        rows = set(zip(view.column("g").tolist(), view.column("v").tolist()))
        if prev is not None:
            assert prev <= rows
        prev = rows


def test_level_out_of_range(catalog):
    handle, stats = small_table(catalog, [10], seed=1)
    fam = build_family(handle, ColumnSet.of("g"), 4, 2, seed=1, stats=stats)
    with pytest.raises(SampleError):
        sample_at_level(fam, fam.level_count)


def test_group_membership_is_uniform(catalog):
    # a group with 10 rows capped at 5: each row kept about half the time
    handle, stats = small_table(catalog, [10], seed=6)
    v = handle.columns()["v"]
    seen = {float(x): 0 for x in v}
    seeds = 500
    for s in range(seeds):
        fam = build_family(handle, ColumnSet.of("g"), 5, 2, seed=s, stats=stats)
        for x in fam.data["v"]:
            seen[float(x)] += 1
    for x, count in seen.items():
        assert abs(count / seeds - 0.5) <= 0.06


def test_family_determinism(catalog):
    handle, stats = small_table(catalog, [30, 20, 7], seed=2)
    a = build_family(handle, ColumnSet.of("g"), 8, 2, seed=99, stats=stats)
    b = build_family(handle, ColumnSet.of("g"), 8, 2, seed=99, stats=stats)
    assert np.array_equal(a.ranks, b.ranks)
    assert np.array_equal(a.data["v"], b.data["v"])
    assert a.ring_rows == b.ring_rows


def test_build_family_errors(catalog):
    handle, stats = small_table(catalog, [10], seed=1)
    with pytest.raises(Exception, match="unknown column"):
        build_family(handle, ColumnSet.of("nope"), 4, 2, seed=1, stats=stats)
    with pytest.raises(SampleError, match="statistics"):
        build_family(handle, ColumnSet.of("v"), 4, 2, seed=1, stats=stats)


# -- store cost -----------------------------------------------------------------


def test_store_cost_examples(catalog):
    handle, stats = small_table(catalog, [5, 50, 500], seed=5)
    assert family_store_cost(ColumnSet.of("g"), 100, stats) == 155
    assert family_store_cost(ColumnSet.of("g"), 1000, stats) == 555


def test_store_cost_matches_zipf_model(catalog):
    # simulated power-law table against the analytic overhead ratio
    max_freq, s, cap = 1_000_000, 1.5, 100
    m = int(max_freq ** (1 / s))
    freqs = np.maximum(np.rint(max_freq / np.arange(1, m + 1) ** s), 1).astype(np.int64)
    g = np.repeat(np.arange(len(freqs), dtype=np.int64), freqs)
    handle = catalog.add_table("zipfish", Schema((("g", "integer"),)), {"g": g})
    stats = catalog.compute_stats(handle, [("g",)])
    simulated = family_store_cost(ColumnSet.of("g"), cap, stats) / len(g)
    analytic = zipf_overhead(s, max_freq, cap)
    assert abs(simulated - analytic) / analytic < 0.01


# -- refresh ---------------------------------------------------------------------


def test_refresh_same_seed_identity(catalog):
    handle, stats = small_table(catalog, [40, 6], seed=7)
    fam = build_family(handle, ColumnSet.of("g"), 8, 2, seed=1, stats=stats)
    catalog.add_family(fam)
    fresh = refresh_family(catalog, fam, new_seed=1)
    assert np.array_equal(fresh.data["v"], fam.data["v"])


def test_refresh_new_seed_same_counts(catalog):
    handle, stats = small_table(catalog, [40, 6], seed=7)
    fam = build_family(handle, ColumnSet.of("g"), 8, 2, seed=1, stats=stats)
    catalog.add_family(fam)
    fresh = refresh_family(catalog, fam, new_seed=2)
    assert fresh.seed == 2
    for lvl in range(fam.level_count):
        a = sample_at_level(fam, lvl).group_row_counts()
        b = sample_at_level(fresh, lvl).group_row_counts()
        assert a == b


def test_refresh_missing_table(catalog):
    handle, stats = small_table(catalog, [10], seed=3)
    fam = build_family(handle, ColumnSet.of("g"), 4, 2, seed=1, stats=stats)
    catalog.add_family(fam)
    del catalog.tables[handle.name]
    with pytest.raises(SampleError, match="no longer present"):
        refresh_family(catalog, fam, new_seed=9)


def test_refresh_concurrent_reader_sees_one_family(catalog):
    # reader checkpoints while the refresh is paused between blocks: it must
    # observe the old family whole, and only the swapped family afterwards
    rng = np.random.default_rng(12)
    n = 200_000  # several blocks
    handle = catalog.add_table(
        "r", Schema((("g", "integer"), ("v", "float"))),
        {"g": rng.integers(0, 5, n), "v": rng.normal(size=n)})
    stats = catalog.compute_stats(handle, [("g",)])
    fam = build_family(handle, ColumnSet.of("g"), 64, 2, seed=1, stats=stats)
    catalog.add_family(fam)
    old_rows = fam.data["v"].copy()

    pause = threading.Event()
    mid_refresh = threading.Event()
    observations = []

    def on_block(block_id):
        if block_id == 1:
            mid_refresh.set()

    worker = threading.Thread(
        target=refresh_family, args=(catalog, fam, 2),
        kwargs={"pause": pause, "on_block": on_block})
    pause.set()
    worker.start()
    mid_refresh.wait(timeout=10)
    pause.clear()  # hold the refresh between blocks
    current = catalog.families[fam.family_id]
    observations.append(np.array_equal(current.data["v"], old_rows))
    pause.set()
    worker.join(timeout=30)
    swapped = catalog.families[fam.family_id]
    assert observations == [True]  # mid-refresh readers saw the old family
    assert swapped.seed == 2
    assert np.array_equal(fam.data["v"], old_rows)  # old copy untouched


# -- Zipf overhead ------------------------------------------------------------------


@pytest.mark.parametrize("s,cap,expected", [
    (1.5, 1e4, 0.024),
    (1.5, 1e5, 0.052),
    (1.5, 1e6, 0.114),
    (2.0, 1e4, 0.0038),
])
def test_zipf_overhead_reference_cells(s, cap, expected):
    assert zipf_overhead(s, 1e9, cap) == pytest.approx(expected, abs=1e-3)


def test_zipf_overhead_monotonic():
    for s in (1.2, 1.5, 2.0):
        ratios = [zipf_overhead(s, 1e9, k) for k in (1e3, 1e4, 1e5, 1e6)]
        assert ratios == sorted(ratios)
    for k in (1e4, 1e5):
        ratios = [zipf_overhead(s, 1e9, k) for s in (1.1, 1.3, 1.5, 1.7, 2.0)]
        assert ratios == sorted(ratios, reverse=True)


def test_zipf_overhead_domain():
    with pytest.raises(SampleError):
        zipf_overhead(0.9, 1e9, 1e4)
    with pytest.raises(SampleError):
        zipf_overhead(1.5, 1e3, 1e4)
    assert zipf_overhead(1.5, 1e6, 1e6) == 1.0
