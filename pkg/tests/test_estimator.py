import math

import numpy as np
import pytest

from straq import (
    AggregateSpec,
    ConfidenceSpec,
    EstimationError,
    MissingSubgroupError,
    PilotStats,
    StratumSummary,
    confidence_interval,
    estimate,
    estimate_density,
    estimate_rows,
    normal_quantile,
    required_rows,
    z_for_confidence,
)


def uniform_stratum(values, weight, rows_read, quantile=False):
    values = np.asarray(values, dtype=np.float64)
    return StratumSummary(
        weight=weight, rows_read=rows_read, matched=len(values),
        sum_y=float(values.sum()), sum_sq=float((values ** 2).sum()),
        values=values if quantile else None)


# -- normal quantile -----------------------------------------------------------


@pytest.mark.parametrize("p,expected", [
    (0.975, 1.959964),
    (0.995, 2.575829),
    (0.9999, 3.719016),
    (0.5, 0.0),
    (0.025, -1.959964),
])
def test_normal_quantile_accuracy(p, expected):
    assert normal_quantile(p) == pytest.approx(expected, abs=1e-6)


def test_z_for_confidence():
    assert z_for_confidence(0.95) == pytest.approx(1.959964, abs=1e-6)
    with pytest.raises(EstimationError):
        z_for_confidence(1.5)


# -- worked examples -----------------------------------------------------------


def test_stratified_sum_by_city():
    # SUM(SessionTime) over the cap-1 Browser sample: the Firefox row carries
    # weight 3 (rate 1/3), the fully-kept rows weight 1
    new_york = [
        StratumSummary(weight=3.0, rows_read=1, matched=1, sum_y=20.0, sum_sq=400.0),
        StratumSummary(weight=1.0, rows_read=2, matched=1, sum_y=82.0, sum_sq=6724.0),
    ]
    g = estimate(AggregateSpec("sum", target="t"), new_york, source_rows=5,
                 key=("New York",))
    assert g.estimate == 142.0
    assert not g.exact
    cambridge = [StratumSummary(weight=1.0, rows_read=2, matched=1,
                                sum_y=22.0, sum_sq=484.0)]
    g2 = estimate(AggregateSpec("sum", target="t"), cambridge, source_rows=5)
    assert g2.estimate == 22.0 and g2.exact and g2.variance == 0.0


def test_quantile_interpolation():
    g = estimate_rows(AggregateSpec("quantile", target="x", p=0.5),
                      np.array([1.0, 2.0, 3.0, 4.0, 5.0]), np.ones(5),
                      {1.0: 5}, source_rows=5)
    assert g.estimate == 2.5  # h = 2.5 between the 2nd and 3rd order statistic


def test_count_table_formulas():
    s = StratumSummary(weight=10**4 / 100, rows_read=100, matched=30)
    g = estimate(AggregateSpec("count"), [s], source_rows=10**4, uniform=True)
    assert g.estimate == 3000.0
    assert g.variance == pytest.approx((10**8 / 100) * 0.3 * 0.7)
    assert g.std_error == pytest.approx(458.2575695, abs=1e-4)
    lo, hi = confidence_interval(g.estimate, g.variance, 0.95)
    assert lo == pytest.approx(2101.8, abs=0.1)
    assert hi == pytest.approx(3898.2, abs=0.1)


def test_missing_subgroup():
    with pytest.raises(MissingSubgroupError):
        estimate(AggregateSpec("count"),
                 [StratumSummary(weight=2.0, rows_read=50, matched=0)],
                 source_rows=100)


def test_degenerate_interval():
    assert confidence_interval(7.0, 0.0, 0.95) == (7.0, 7.0)
    with pytest.raises(EstimationError):
        confidence_interval(1.0, -1.0, 0.95)


# -- uniform moments -------------------------------------------------------------


def test_avg_uniform():
    vals = np.array([2.0, 4.0, 9.0])
    g = estimate(AggregateSpec("avg", target="x"),
                 [uniform_stratum(vals, weight=10.0, rows_read=30)],
                 source_rows=300, uniform=True)
    assert g.estimate == pytest.approx(5.0)
    assert g.variance == pytest.approx(np.var(vals, ddof=1) / 3)


def test_sum_uniform_default_and_literal_variance():
    vals = np.array([2.0, 4.0, 9.0])
    n_read, N = 30, 300
    stratum = uniform_stratum(vals, weight=N / n_read, rows_read=n_read)
    g = estimate(AggregateSpec("sum", target="x"), [stratum], N, uniform=True)
    assert g.estimate == pytest.approx((N / n_read) * vals.sum())
    zero_filled = np.concatenate([vals, np.zeros(n_read - len(vals))])
    assert g.variance == pytest.approx(N**2 * np.var(zero_filled, ddof=1) / n_read)
    lit = estimate(AggregateSpec("sum", target="x"), [stratum], N, uniform=True,
                   literal_sum_variance=True)
    c = len(vals) / n_read
    want = N**2 * (np.var(vals, ddof=1) / n_read) * c * (1 - c)
    assert lit.variance == pytest.approx(want)
    assert lit.estimate == g.estimate


def test_exactness_with_rate_one():
    vals = np.array([1.0, 2.0, 3.0])
    g = estimate(AggregateSpec("sum", target="x"),
                 [uniform_stratum(vals, weight=1.0, rows_read=3)],
                 source_rows=3, uniform=True)
    assert g.exact and g.variance == 0.0 and g.estimate == 6.0


def test_scale_equivariance():
    rng = np.random.default_rng(3)
    vals = rng.normal(5, 2, 40)
    reads = {2.5: 100}
    sum1 = estimate_rows(AggregateSpec("sum", target="x"), vals,
                         np.full(40, 2.5), reads, 1000)
    sum7 = estimate_rows(AggregateSpec("sum", target="x"), vals * 7,
                         np.full(40, 2.5), reads, 1000)
    assert sum7.estimate == pytest.approx(7 * sum1.estimate)
    cnt1 = estimate_rows(AggregateSpec("count"), vals, np.full(40, 2.5), reads, 1000)
    cnt7 = estimate_rows(AggregateSpec("count"), vals * 7, np.full(40, 2.5), reads, 1000)
    assert cnt1.estimate == cnt7.estimate


# -- stratified composition --------------------------------------------------------


def test_stratified_count_and_avg():
    strata = [
        uniform_stratum(np.array([10.0, 12.0]), weight=5.0, rows_read=4),
        uniform_stratum(np.array([20.0]), weight=1.0, rows_read=1),
    ]
    cnt = estimate(AggregateSpec("count"), strata, source_rows=100)
    assert cnt.estimate == 5.0 * 2 + 1.0  # expansion count
    avg = estimate(AggregateSpec("avg", target="x"), strata, source_rows=100)
    assert avg.estimate == pytest.approx((5 * 22.0 + 20.0) / 11.0)
    assert avg.variance >= 0


def test_stratified_unbiasedness_over_families(catalog):
    # SUM and COUNT averaged over 500 fresh sample families stay within
    # 3 standard errors of the truth
    from straq import ColumnSet, build_family
    from synthdata import add_skewed_table

    handle, _ = add_skewed_table(catalog, "u", 3000, 12, seed=42)
    cols = handle.columns()
    truth_sum = float(cols["v"].sum())
    truth_cnt = float(handle.row_count)
    stats = catalog.compute_stats(handle, [("g",)])
    spec_sum = AggregateSpec("sum", target="x")
    spec_cnt = AggregateSpec("count")
    sums, cnts = [], []
    for seed in range(500):
        fam = build_family(handle, ColumnSet.of("g"), 32, 2, seed, stats)
        freq = fam.group_freq_of_row
        weights = np.where(freq > 32, freq / 32.0, 1.0)
        reads = {}
        for w in np.unique(weights):
            reads[float(w)] = int((weights == w).sum())
        sums.append(estimate_rows(spec_sum, fam.data["v"], weights, reads,
                                  handle.row_count).estimate)
        cnts.append(estimate_rows(spec_cnt, fam.data["v"], weights, reads,
                                  handle.row_count).estimate)
    for series, truth in ((sums, truth_sum), (cnts, truth_cnt)):
        mean = np.mean(series)
        se = np.std(series, ddof=1) / math.sqrt(len(series))
        if se == 0:
            assert mean == truth
        else:
            assert abs(mean - truth) <= 3 * se


# -- density -------------------------------------------------------------------------


def test_density_uniform():
    rng = np.random.default_rng(5)
    values = np.sort(rng.random(10_000))
    assert 0.9 <= estimate_density(values, 0.5) <= 1.1


def test_density_degenerate():
    assert estimate_density(np.full(10, 7.0), 7.0) is None
    g = estimate_rows(AggregateSpec("quantile", target="x", p=0.5),
                      np.full(10, 7.0), np.ones(10), {1.0: 10}, 10)
    assert g.estimate == 7.0 and g.variance == 0.0


def test_density_two_point():
    values = np.sort(np.concatenate([np.zeros(500), np.full(500, 10.0)]))
    bins = math.ceil(math.sqrt(1000))
    width = 10.0 / bins
    assert estimate_density(values, 0.0) == pytest.approx(500 / (1000 * width))


def test_density_empty_bin_widens():
    values = np.sort(np.concatenate([np.zeros(50), np.full(50, 10.0)]))
    # the middle of the range has empty bins; nearest non-empty wins
    d = estimate_density(values, 5.0)
    assert d > 0


# -- inverting the formulas ------------------------------------------------------------


def test_required_rows_avg():
    n = required_rows(AggregateSpec("avg", target="x"),
                      ConfidenceSpec(0.95, 0.1, "absolute"),
                      PilotStats(variance_s2=4.0))
    assert n == 1537  # ceil(z^2 * 4 / 0.01) at z = 1.959964


def test_required_rows_infinite_bound():
    n = required_rows(AggregateSpec("avg", target="x"),
                      ConfidenceSpec(0.95, math.inf, "absolute"),
                      PilotStats(variance_s2=4.0))
    assert n == 1


def test_required_rows_count_relative():
    pilot = PilotStats(estimate=0.5 * 10**6, c_hat=0.5, source_rows=10**6)
    spec = ConfidenceSpec(0.95, 0.01, "relative")
    n = required_rows(AggregateSpec("count"), spec, pilot)
    # independent oracle: scan for the smallest n meeting the bound
    z = z_for_confidence(0.95)
    eps_abs = 0.01 * pilot.estimate

    def variance(k):
        return (pilot.source_rows**2 / k) * pilot.c_hat * (1 - pilot.c_hat)

    assert z * math.sqrt(variance(n)) <= eps_abs
    assert z * math.sqrt(variance(n - 1)) > eps_abs


def test_required_rows_count_calibration():
    # Monte-Carlo: with the required read count, the relative error stays
    # under 1% in about 95% of trials
    rng = np.random.default_rng(17)
    N, c = 10**6, 0.5
    pilot = PilotStats(estimate=N * c, c_hat=c, source_rows=N)
    n = required_rows(AggregateSpec("count"), ConfidenceSpec(0.95, 0.01, "relative"),
                      pilot)
    hits = 0
    trials = 400
    for _ in range(trials):
        matched = rng.binomial(n, c)
        est = (N / n) * matched
        hits += abs(est - N * c) <= 0.01 * N * c
    assert hits / trials >= 0.92


def test_required_rows_monotonicity():
    pilot = PilotStats(variance_s2=9.0, estimate=4.0)
    spec = AggregateSpec("avg", target="x")
    ns = [required_rows(spec, ConfidenceSpec(0.95, e, "absolute"), pilot)
          for e in (0.01, 0.05, 0.1, 0.5)]
    assert ns == sorted(ns, reverse=True)
    ns = [required_rows(spec, ConfidenceSpec(c, 0.1, "absolute"), pilot)
          for c in (0.5, 0.9, 0.95, 0.99)]
    assert ns == sorted(ns)


def test_required_rows_errors():
    spec = AggregateSpec("avg", target="x")
    with pytest.raises(EstimationError):
        required_rows(spec, ConfidenceSpec(0.95, 0.1, "relative"),
                      PilotStats(estimate=0.0, variance_s2=1.0))
    with pytest.raises(EstimationError):
        required_rows(spec, ConfidenceSpec(0.95, 0.0, "absolute"),
                      PilotStats(variance_s2=1.0))


# -- Monte-Carlo CI calibration ----------------------------------------------------------


def test_avg_ci_coverage():
    rng = np.random.default_rng(77)
    population = rng.lognormal(0.0, 1.0, size=200_000)
    truth = population.mean()
    spec = AggregateSpec("avg", target="x")
    hits, trials, n = 0, 1000, 1000
    for _ in range(trials):
        sample = population[rng.integers(0, len(population), size=n)]
        g = estimate(spec, [uniform_stratum(sample, len(population) / n, n)],
                     len(population), 0.95, uniform=True)
        lo, hi = g.ci
        hits += lo <= truth <= hi
    assert 0.92 <= hits / trials <= 0.98
