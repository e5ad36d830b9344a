"""Aggregate estimates with closed-form error over uniform and stratified rows.

Estimates follow the standard closed forms for AVG, COUNT, SUM, and QUANTILE
on uniform samples, and expansion (inverse-rate) weighting for stratified
rows where different groups were kept at different rates.  Variances for
mixed-rate inputs treat equal-rate row groups as independent strata: each
stratum contributes the uniform-sample variance scaled by its squared
expansion factor, summed for COUNT and SUM, and combined with the delta
method for AVG.

Note on SUM: the literal textbook-style variance N^2 * (S_n^2/n) * c(1-c)
mixes the mean's and the match-indicator's dispersion in a way that cannot be
reproduced from a derivation, so the default is the expansion-estimator
variance N^2 * s^2 / n where s^2 is the sample variance of the zero-filled
target (non-matching rows count as 0).  The literal form stays available
behind ``literal_sum_variance=True`` for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EstimationError, MissingSubgroupError

AGGREGATE_OPS = ("avg", "sum", "count", "quantile")


@dataclass(frozen=True)
class AggregateSpec:
    """One aggregate of the select list: op, target expression, quantile p."""

    op: str
    target: object | None = None  # None only for COUNT(*)
    p: float | None = None

    def __post_init__(self):
        if self.op not in AGGREGATE_OPS:
            raise EstimationError(f"unknown aggregate {self.op!r}")
        if self.op == "quantile" and not (self.p and 0.0 < self.p < 1.0):
            raise EstimationError(f"quantile fraction {self.p} outside (0, 1)")
        if self.op != "count" and self.target is None:
            raise EstimationError(f"{self.op} needs a target expression")


@dataclass(frozen=True)
class ConfidenceSpec:
    """An (epsilon, confidence) error bound; kind is relative or absolute."""

    confidence: float = 0.95
    epsilon: float | None = None
    kind: str | None = None

    def __post_init__(self):
        if not (0.0 < self.confidence < 1.0):
            raise EstimationError(f"confidence {self.confidence} outside (0, 1)")
        if self.kind not in (None, "relative", "absolute"):
            raise EstimationError(f"unknown bound kind {self.kind!r}")


@dataclass
class GroupEstimate:
    key: tuple
    estimate: float
    variance: float
    confidence: float
    n: int               # matching rows observed
    rows_read: int
    exact: bool
    sample_id: str = ""
    flags: tuple[str, ...] = ()

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance)

    @property
    def ci(self) -> tuple[float, float]:
        return confidence_interval(self.estimate, self.variance, self.confidence)

    @property
    def ci_low(self) -> float:
        return self.ci[0]

    @property
    def ci_high(self) -> float:
        return self.ci[1]

    @property
    def half_width(self) -> float:
        return z_for_confidence(self.confidence) * self.std_error

    def relative_error_at(self, confidence: float) -> float:
        """Half-width over |estimate| at the given confidence."""
        if self.estimate == 0:
            return math.inf if self.variance > 0 else 0.0
        return z_for_confidence(confidence) * self.std_error / abs(self.estimate)


@dataclass
class StratumSummary:
    """Moments of one equal-rate stratum, zero-filled over its read rows.

    ``weight`` is the expansion factor (reciprocal sampling rate, kept as the
    exact integer ratio group_frequency/cap when it comes from a stratified
    sample).  ``rows_read`` counts every row read in the stratum, matching or
    not; ``sum_y``/``sum_sq`` accumulate only matching rows, which is exactly
    the zero-filled convention.
    """

    weight: float
    rows_read: int
    matched: int
    sum_y: float = 0.0
    sum_sq: float = 0.0
    values: np.ndarray | None = None

    @property
    def rate(self) -> float:
        return 1.0 / self.weight


# -- normal quantile ----------------------------------------------------------

# Acklam's rational approximation to the inverse standard-normal CDF
# (relative error < 1.15e-9, comfortably inside the 1e-6 contract).
_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02,
             -2.759285104469687e+02, 1.383577518672690e+02,
             -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02,
             -1.556989798598866e+02, 6.680131188771972e+01,
             -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01,
             -2.400758277161838e+00, -2.549732539343734e+00,
             4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01,
             2.445134137142996e+00, 3.754408661907416e+00)
_ACKLAM_SPLIT = 0.02425


def normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF via Acklam's rational approximation."""
    if not (0.0 < p < 1.0):
        raise EstimationError(f"quantile argument {p} outside (0, 1)")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    if p < _ACKLAM_SPLIT:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    if p > 1.0 - _ACKLAM_SPLIT:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)


def z_for_confidence(confidence: float) -> float:
    """Two-sided standard-normal quantile: z such that P(|Z| <= z) = confidence."""
    if not (0.0 < confidence < 1.0):
        raise EstimationError(f"confidence {confidence} outside (0, 1)")
    return normal_quantile((1.0 + confidence) / 2.0)


def confidence_interval(estimate: float, variance: float, confidence: float
                        ) -> tuple[float, float]:
    """Normal-approximation interval estimate +- z_C * sqrt(variance)."""
    if variance < 0:
        raise EstimationError(f"negative variance {variance}")
    if variance == 0:
        return (estimate, estimate)
    half = z_for_confidence(confidence) * math.sqrt(variance)
    return (estimate - half, estimate + half)


# -- density ------------------------------------------------------------------


def estimate_density(sorted_values: np.ndarray, x_q: float) -> float | None:
    """Histogram density estimate at ``x_q`` with ceil(sqrt(n)) equal bins.

    Returns None when every value is identical (the quantile is then exact).
    If the bin holding ``x_q`` is empty the nearest non-empty bin is used.
    """
    n = len(sorted_values)
    if n < 2:
        raise EstimationError("density estimation needs at least 2 values")
    lo, hi = float(sorted_values[0]), float(sorted_values[-1])
    if hi == lo:
        return None
    bins = math.ceil(math.sqrt(n))
    width = (hi - lo) / bins
    counts, _ = np.histogram(sorted_values, bins=bins, range=(lo, hi))
    idx = min(int((x_q - lo) / width), bins - 1) if x_q > lo else 0
    if counts[idx] == 0:
        # widen outward to the nearest non-empty bin (lower index on ties)
        for dist in range(1, bins):
            left, right = idx - dist, idx + dist
            if left >= 0 and counts[left]:
                idx = left
                break
            if right < bins and counts[right]:
                idx = right
                break
    return float(counts[idx]) / (n * width)


# -- core estimation ----------------------------------------------------------


def _interp_quantile(values: np.ndarray, weights: np.ndarray, p: float) -> float:
    """Linear interpolation at weighted position h = p * total_weight,
    1-indexed in weight units (reduces to the classic x_floor(h) +
    frac * (x_ceil(h) - x_floor(h)) when all weights are 1)."""
    order = np.argsort(values, kind="stable")
    x = values[order]
    cumw = np.cumsum(weights[order])
    h = p * cumw[-1]
    h = min(max(h, cumw[0]), cumw[-1])
    return float(np.interp(h, cumw, x))


def _sample_var(sum_y: float, sum_sq: float, n: int) -> float:
    if n < 2:
        return 0.0
    mean = sum_y / n
    return max((sum_sq - n * mean * mean) / (n - 1), 0.0)


def estimate(op: AggregateSpec, strata: Sequence[StratumSummary],
             source_rows: int, confidence: float = 0.95, *,
             uniform: bool = False, literal_sum_variance: bool = False,
             key: tuple = (), sample_id: str = "") -> GroupEstimate:
    """Estimate one aggregate for one output group from stratum summaries.

    ``uniform=True`` selects the classic single-rate formulas (the input must
    then be a single stratum whose reads span the whole sample); otherwise
    strata are composed as independent sub-populations.
    """
    strata = sorted(strata, key=lambda s: (s.weight, s.rows_read))
    matched = sum(s.matched for s in strata)
    reads = sum(s.rows_read for s in strata)
    if matched == 0:
        raise MissingSubgroupError(
            f"group {key!r}: no matching rows in the sample")
    flags: list[str] = []
    exact = all(s.weight == 1.0 for s in strata)

    if op.op == "quantile":
        est, var, qflags = _estimate_quantile(op, strata, exact)
        flags.extend(qflags)
        return GroupEstimate(key, est, 0.0 if exact else var, confidence,
                             matched, reads, exact, sample_id, tuple(flags))

    if uniform:
        if len(strata) != 1:
            raise EstimationError("uniform estimation expects a single stratum")
        s = strata[0]
        est, var = _uniform_moments(op, s, source_rows, literal_sum_variance, flags)
    else:
        est, var = _stratified_moments(op, strata, flags)
    if exact:
        var = 0.0
    return GroupEstimate(key, est, var, confidence, matched, reads, exact,
                         sample_id, tuple(flags))


def _uniform_moments(op, s: StratumSummary, N: int, literal_sum, flags):
    n, m = s.rows_read, s.matched
    if op.op == "avg":
        est = s.sum_y / m
        if m < 2:
            flags.append("variance-undefined")
            return est, 0.0
        return est, _sample_var(s.sum_y, s.sum_sq, m) / m
    c_hat = m / n
    if op.op == "count":
        est = (N / n) * m
        return est, (N * N / n) * c_hat * (1.0 - c_hat)
    # sum
    est = (N / n) * s.sum_y
    if literal_sum:
        var = N * N * (_sample_var(s.sum_y, s.sum_sq, m) / n) * c_hat * (1.0 - c_hat)
    else:
        var = N * N * _sample_var(s.sum_y, s.sum_sq, n) / n
    return est, var


def _stratum_pieces(s: StratumSummary):
    """Per-stratum (count, sum) estimates and their variance/covariance
    contributions; a fully-kept stratum (weight 1) is a census and adds none."""
    n = s.rows_read
    pop = s.weight * n
    cnt = s.weight * s.matched
    tot = s.weight * s.sum_y
    if s.weight == 1.0 or n < 2:
        return cnt, tot, 0.0, 0.0, 0.0
    c_hat = s.matched / n
    var_cnt = (pop * pop / n) * c_hat * (1.0 - c_hat)
    var_tot = pop * pop * _sample_var(s.sum_y, s.sum_sq, n) / n
    mu0 = s.sum_y / n
    cov = pop * pop * ((s.sum_y - n * mu0 * c_hat) / (n - 1)) / n
    return cnt, tot, var_cnt, var_tot, cov


def _stratified_moments(op, strata, flags):
    cnt = tot = var_cnt = var_tot = cov = 0.0
    for s in strata:
        if s.weight > 1.0 and s.rows_read < 2:
            flags.append("variance-undefined")
        c, t, vc, vt, cv = _stratum_pieces(s)
        cnt += c
        tot += t
        var_cnt += vc
        var_tot += vt
        cov += cv
    if op.op == "count":
        return cnt, var_cnt
    if op.op == "sum":
        return tot, var_tot
    # avg: ratio of the two expansion estimates, delta-method variance
    est = tot / cnt
    var = (var_tot - 2.0 * est * cov + est * est * var_cnt) / (cnt * cnt)
    return est, max(var, 0.0)


def _estimate_quantile(op, strata, exact):
    parts = [s for s in strata if s.values is not None and len(s.values)]
    if not parts:
        raise EstimationError("quantile estimation needs buffered values")
    values = np.concatenate([np.asarray(s.values, dtype=np.float64) for s in parts])
    weights = np.concatenate([
        np.full(len(s.values), s.weight, dtype=np.float64) for s in parts
    ])
    est = _interp_quantile(values, weights, op.p)
    if exact:
        return est, 0.0, []
    svals = np.sort(values, kind="stable")
    density = estimate_density(svals, est)
    if density is None:
        return est, 0.0, ["degenerate-distribution"]
    if density == 0.0:
        raise EstimationError("zero estimated density at the quantile")
    n_eff = float(weights.sum()) ** 2 / float((weights * weights).sum())
    var = op.p * (1.0 - op.p) / (n_eff * density * density)
    return est, var, []


def estimate_rows(op: AggregateSpec, values: np.ndarray, weights: np.ndarray,
                  reads_by_weight: dict[float, int], source_rows: int,
                  confidence: float = 0.95, *, uniform: bool = False,
                  key: tuple = (), sample_id: str = "",
                  literal_sum_variance: bool = False) -> GroupEstimate:
    """Convenience entry point over rate-tagged matching rows.

    ``values`` and ``weights`` describe the matching rows (weight is the
    reciprocal sampling rate); ``reads_by_weight`` gives the total rows read
    per stratum, needed for the zero-filled variance terms.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    strata = []
    for w in sorted(reads_by_weight):
        mask = weights == w
        vals = values[mask]
        strata.append(StratumSummary(
            weight=float(w), rows_read=int(reads_by_weight[w]),
            matched=int(mask.sum()), sum_y=float(vals.sum()),
            sum_sq=float((vals * vals).sum()),
            values=vals if op.op == "quantile" else None,
        ))
    return estimate(op, strata, source_rows, confidence, uniform=uniform,
                    key=key, sample_id=sample_id,
                    literal_sum_variance=literal_sum_variance)


# -- inverting the error formulas ----------------------------------------------


@dataclass
class PilotStats:
    """Probe-run statistics needed to invert the error formulas."""

    estimate: float | None = None
    variance_s2: float | None = None   # matched-sample variance (avg)
    zero_filled_s2: float | None = None  # zero-filled variance over reads (sum)
    c_hat: float | None = None
    density: float | None = None
    source_rows: int | None = None


def required_rows(op: AggregateSpec, bound: ConfidenceSpec, pilot: PilotStats) -> int:
    """Smallest n with z_C * sqrt(variance(n)) <= the absolute error bound.

    For AVG and QUANTILE the returned n counts matching rows; for COUNT and
    SUM it counts rows read from the sample (their Table-style variances are
    stated per read row).
    """
    if bound.epsilon is None:
        raise EstimationError("no error bound given")
    z = z_for_confidence(bound.confidence)
    eps = bound.epsilon
    if bound.kind == "relative":
        if pilot.estimate is None or pilot.estimate == 0:
            raise EstimationError("relative bound needs a nonzero pilot estimate")
        eps = eps * abs(pilot.estimate)
    if eps == 0:
        raise EstimationError("zero error bound cannot be met by any sample")
    if math.isinf(eps):
        return 1
    if op.op == "avg":
        if pilot.variance_s2 is None:
            raise EstimationError("avg inversion needs the pilot sample variance")
        return max(1, math.ceil(z * z * pilot.variance_s2 / (eps * eps)))
    if op.op == "count":
        if pilot.c_hat is None or pilot.source_rows is None:
            raise EstimationError("count inversion needs c_hat and the table size")
        N, c = pilot.source_rows, pilot.c_hat
        return max(1, math.ceil(z * z * N * N * c * (1.0 - c) / (eps * eps)))
    if op.op == "sum":
        if pilot.zero_filled_s2 is None or pilot.source_rows is None:
            raise EstimationError("sum inversion needs the zero-filled variance")
        N = pilot.source_rows
        return max(1, math.ceil(z * z * N * N * pilot.zero_filled_s2 / (eps * eps)))
    # quantile
    if not pilot.density:
        raise EstimationError("quantile inversion needs a positive pilot density")
    p = op.p
    return max(1, math.ceil(z * z * p * (1.0 - p) /
                            (pilot.density * pilot.density * eps * eps)))
