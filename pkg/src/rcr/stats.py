"""Robust measures of central tendency and sample deviation.

Every function accepts plain sequences of measurements plus optional
per-point weights. Equal weights are collapsed to the unweighted code path,
so weighted and unweighted results agree bit-for-bit in that case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import erfinv

# Bin-center offset for sorted-deviation percentiles: (i - 1 + 0.683) / N.
BIN_OFFSET = 0.683
PERCENTILE_68 = 0.683
SQRT2 = math.sqrt(2.0)


class CentralTendency(str, Enum):
    MEAN = "mean"
    MEDIAN = "median"
    MODE = "mode"


class Technique(str, Enum):
    STDDEV = "stddev"
    T68_1 = "t68_1"
    T68_2 = "t68_2"
    T68_3 = "t68_3"


class Sidedness(str, Enum):
    """How deviations on either side of the center are combined.

    ``EACH`` keeps separate below/above deviations, for asymmetric
    uncontaminated distributions. ``SMALLER`` applies the smaller of the two
    one-sided deviations to both sides, for asymmetric contaminants, which
    only inflate the contaminated side.
    """

    TWO_SIDED = "two"
    EACH = "each"
    SMALLER = "smaller"


@dataclass(frozen=True)
class Sample:
    """Measurements with optional weights and error bars."""

    values: np.ndarray
    weights: np.ndarray | None = None
    error_bars: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size == 0:
            raise ValueError("sample is empty")
        if not np.all(np.isfinite(values)):
            raise ValueError("sample values must be finite")
        object.__setattr__(self, "values", values)
        if self.weights is not None:
            object.__setattr__(self, "weights", check_weights(self.weights, values.size))
        if self.error_bars is not None:
            sy = np.asarray(self.error_bars, dtype=float).ravel()
            if sy.shape != values.shape or not np.all(np.isfinite(sy)) or np.any(sy <= 0):
                raise ValueError("error bars must be positive, finite and match values")
            object.__setattr__(self, "error_bars", sy)

    def __len__(self):
        return self.values.size

    @property
    def effective_weights(self) -> np.ndarray | None:
        """Explicit weights, else inverse-variance weights from error bars."""
        if self.weights is not None:
            return self.weights
        if self.error_bars is not None:
            return self.error_bars**-2
        return None

    def subset(self, index) -> "Sample":
        take = lambda a: None if a is None else a[index]
        return Sample(self.values[index], take(self.weights), take(self.error_bars))


def check_weights(weights, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != n:
        raise ValueError(f"expected {n} weights, got {w.size}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    return w


def _prepare(values, weights=None) -> tuple[np.ndarray, np.ndarray | None]:
    y = np.asarray(values, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("sample is empty")
    if weights is None:
        return y, None
    w = check_weights(weights, y.size)
    if np.all(w == w[0]):
        return y, None
    return y, w


def weighted_mean(values, weights=None) -> float:
    y, w = _prepare(values, weights)
    # fsum is correctly rounded, so the result does not depend on input order
    if w is None:
        return math.fsum(y) / y.size
    return math.fsum(w * y) / math.fsum(w)


def weighted_median(values, weights=None) -> float:
    """Weighted 50th percentile.

    The first sorted value whose cumulative weight fraction reaches one half
    is returned; an exact crossing averages it with the next value, which
    reproduces the ordinary even-N median for equal weights.
    """
    y, w = _prepare(values, weights)
    if w is None:
        return float(np.median(y))
    order = np.argsort(y, kind="stable")
    ys, ws = y[order], w[order]
    cum = np.cumsum(ws)
    half = 0.5 * cum[-1]
    i = int(np.searchsorted(cum, half * (1 - 1e-12), side="left"))
    if i + 1 < ys.size and math.isclose(cum[i], half, rel_tol=1e-12):
        return float(0.5 * (ys[i] + ys[i + 1]))
    return float(ys[i])


def narrowest_half_window(x: np.ndarray, w: np.ndarray) -> tuple[int, int]:
    """Bounds ``[lo, hi)`` of the narrowest run of sorted ``x`` holding half the weight.

    Runs of equal width (to a relative 1e-9 of the span) resolve to the
    lowest one.
    """
    span = x[-1] - x[0]
    cum = np.concatenate(([0.0], np.cumsum(w)))
    half = 0.5 * cum[-1]
    stop = np.searchsorted(cum, cum[:-1] + half * (1 - 1e-12), side="left")
    starts = np.flatnonzero(stop <= x.size)
    ends = stop[starts] - 1
    widths = x[ends] - x[starts]
    best = int(np.flatnonzero(widths <= widths.min() + 1e-9 * span)[0])
    return int(starts[best]), int(ends[best]) + 1


def half_sample_mode(values, weights=None) -> float:
    """Iterated half-sample mode, generalized to weighted data.

    Each pass keeps the narrowest contiguous run of sorted values holding at
    least half of the remaining weight. Recursion stops at two or fewer
    points, whose weighted mean is returned.
    """
    y, w = _prepare(values, weights)
    if w is None:
        x = np.sort(y)
        w = np.ones_like(x)
    else:
        order = np.argsort(y, kind="stable")
        x, w = y[order], w[order]
    while x.size > 2:
        if x[-1] == x[0]:
            return float(x[0])
        lo, hi = narrowest_half_window(x, w)
        if hi - lo == x.size:
            break
        x, w = x[lo:hi], w[lo:hi]
    return float(np.sum(w * x) / np.sum(w))


def central_tendency(values, kind: CentralTendency | str, weights=None) -> float:
    kind = CentralTendency(kind)
    if kind is CentralTendency.MEAN:
        return weighted_mean(values, weights)
    if kind is CentralTendency.MEDIAN:
        return weighted_median(values, weights)
    return half_sample_mode(values, weights)


@dataclass(frozen=True)
class DeviationSet:
    """Absolute deviations sorted ascending, paired with Gaussian abscissae.

    ``percentiles[i]`` is the bin-center percentile of the i-th deviation and
    ``abscissae[i] = sqrt(2) * erfinv(percentiles[i])`` is the number of
    standard deviations a Gaussian point at that percentile would lie from the
    center.
    """

    deviations: np.ndarray
    percentiles: np.ndarray
    abscissae: np.ndarray
    weights: np.ndarray | None
    source_mu: float

    def __len__(self):
        return self.deviations.size


def deviation_percentiles(n: int, sorted_weights: np.ndarray | None = None) -> np.ndarray:
    if sorted_weights is None:
        return (np.arange(1, n + 1) - (1 - BIN_OFFSET)) / n
    cum = np.cumsum(sorted_weights)
    return (cum - (1 - BIN_OFFSET) * sorted_weights) / cum[-1]


def build_deviation_set(values, mu: float, weights=None) -> DeviationSet:
    if not math.isfinite(mu):
        raise ValueError("mu must be finite")
    y, w = _prepare(values, weights)
    dev = np.abs(y - mu)
    if w is None:
        return sorted_deviation_set(np.sort(dev), mu)
    order = np.argsort(dev, kind="stable")
    return sorted_deviation_set(dev[order], mu, w[order])


def sorted_deviation_set(deviations: np.ndarray, mu: float, weights=None) -> DeviationSet:
    """Deviation set from deviations already sorted ascending."""
    p = deviation_percentiles(deviations.size, weights)
    return DeviationSet(deviations, p, SQRT2 * erfinv(p), weights, float(mu))


@dataclass(frozen=True)
class SigmaEstimate:
    """Deviation estimate; ``minus``/``plus`` differ only for one-sided use."""

    minus: float
    plus: float
    technique: Technique
    corrected: bool = False

    @classmethod
    def symmetric(cls, sigma: float, technique: Technique, corrected: bool = False):
        return cls(float(sigma), float(sigma), Technique(technique), corrected)

    @property
    def asymmetric(self) -> bool:
        return self.minus != self.plus

    @property
    def sigma(self) -> float:
        if self.asymmetric:
            raise ValueError("asymmetric estimate has no single sigma; use minus/plus")
        return self.plus

    def scaled(self, factor: float) -> "SigmaEstimate":
        return SigmaEstimate(self.minus * factor, self.plus * factor, self.technique, True)

    def per_point(self, residuals) -> np.ndarray:
        """Side-appropriate sigma for each residual (value minus center)."""
        r = np.asarray(residuals, dtype=float)
        return np.where(r < 0, self.minus, self.plus)

    def to_dict(self) -> dict:
        return {
            "minus": self.minus,
            "plus": self.plus,
            "sigma": None if self.asymmetric else self.plus,
            "technique": self.technique.value,
            "corrected": self.corrected,
        }


def sigma_technique1(devset: DeviationSet) -> SigmaEstimate:
    """68.3rd percentile of the sorted deviations.

    Linear interpolation between bin-center percentiles, anchored at zero
    deviation for percentile zero.
    """
    if len(devset) == 0:
        raise ValueError("deviation set is empty")
    p = np.concatenate(([0.0], devset.percentiles))
    d = np.concatenate(([0.0], devset.deviations))
    return SigmaEstimate.symmetric(np.interp(PERCENTILE_68, p, d), Technique.T68_1)


def sigma_technique2(devset: DeviationSet) -> SigmaEstimate:
    """Slope of the least-squares line through the origin, deviation vs abscissa."""
    a, d = devset.abscissae, devset.deviations
    w = np.ones_like(a) if devset.weights is None else devset.weights
    denom = np.sum(w * a * a)
    if denom == 0:
        raise ValueError("all abscissae are zero")
    return SigmaEstimate.symmetric(np.sum(w * a * d) / denom, Technique.T68_2)


MIN_FIRST_SEGMENT = 3


def sigma_technique3(devset: DeviationSet) -> SigmaEstimate:
    """First-segment slope of a continuous broken line through the origin.

    Every interior abscissa is tried as the break; each candidate is a linear
    two-slope least-squares problem solved in closed form from prefix sums.
    Only upward breaks qualify, and the unbroken line competes as well; the
    smallest residual sum of squares wins.
    """
    n = len(devset)
    if n < 3:
        return SigmaEstimate.symmetric(sigma_technique2(devset).plus, Technique.T68_3)
    a, d = devset.abscissae, devset.deviations
    if not np.any(d):
        return SigmaEstimate.symmetric(0.0, Technique.T68_3)
    w = np.ones_like(a) if devset.weights is None else devset.weights

    def below(v):  # sum over i <= k
        return np.cumsum(v)[1:-1]

    def above(v):  # sum over i > k
        return np.cumsum(v[::-1])[::-1][2:]

    ak = a[1:-1]
    w_gt = above(w)
    a_gt, aa_gt = above(w * a), above(w * a * a)
    d_gt, ad_gt = above(w * d), above(w * a * d)
    s11 = below(w * a * a) + ak * ak * w_gt
    s12 = ak * (a_gt - ak * w_gt)
    s22 = aa_gt - 2 * ak * a_gt + ak * ak * w_gt
    t1 = below(w * a * d) + ak * d_gt
    t2 = ad_gt - ak * d_gt
    det = s11 * s22 - s12 * s12
    ok = det > 1e-12 * s11 * np.maximum(s22, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope1 = (t1 * s22 - t2 * s12) / det
        slope2 = (s11 * t2 - s12 * t1) / det
        sse = np.sum(w * d * d) - (slope1 * t1 + slope2 * t2)
    # contamination only bends the curve upward; a first segment of one or two
    # points near zero deviation is noise, not a slope
    ok &= np.arange(1, n - 1) >= MIN_FIRST_SEGMENT - 1
    flat = 1e-9 * d[-1] / a[-1]  # rounding-level slope, so a true zero is not decided by its sign
    sse = np.where(ok & (slope1 > -flat) & (slope2 >= slope1), sse, np.inf)
    line = sigma_technique2(devset).plus
    line_sse = np.sum(w * (d - line * a) ** 2)
    k = int(np.argmin(sse))
    if not sse[k] < line_sse:
        return SigmaEstimate.symmetric(line, Technique.T68_3)
    return SigmaEstimate.symmetric(max(slope1[k], 0.0), Technique.T68_3)


_TECHNIQUES = {
    Technique.T68_1: sigma_technique1,
    Technique.T68_2: sigma_technique2,
    Technique.T68_3: sigma_technique3,
}


def percentile_sigma(values, mu: float, technique: Technique | str, weights=None) -> SigmaEstimate:
    """Two-sided 68.3-percentile deviation by the named technique."""
    return _TECHNIQUES[Technique(technique)](build_deviation_set(values, mu, weights))


def one_sided_sigmas(values, mu: float, technique: Technique | str, weights=None) -> SigmaEstimate:
    """Separate deviations below and above ``mu``.

    Points exactly at ``mu`` count on both sides. A side with no points takes
    the other side's value.
    """
    technique = Technique(technique)
    if technique is Technique.STDDEV:
        raise ValueError("one-sided deviations use a 68.3-percentile technique")
    y, w = _prepare(values, weights)
    sides = []
    for mask in (y <= mu, y >= mu):
        if not np.any(mask):
            sides.append(None)
            continue
        ws = None if w is None else w[mask]
        sides.append(percentile_sigma(y[mask], mu, technique, ws).plus)
    lo, hi = sides
    lo = hi if lo is None else lo
    hi = lo if hi is None else hi
    return SigmaEstimate(lo, hi, technique)


def std_deviation(values, mu: float, weights=None) -> SigmaEstimate:
    """Standard deviation about ``mu`` with an N-1 denominator.

    Weighted data use N/(N-1) times the weighted mean squared deviation.
    """
    y, w = _prepare(values, weights)
    n = y.size
    if n < 2:
        raise ValueError("standard deviation needs at least two points")
    r2 = (y - mu) ** 2
    if w is None:
        var = math.fsum(r2) / (n - 1)
    else:
        var = n / (n - 1) * math.fsum(w * r2) / math.fsum(w)
    return SigmaEstimate.symmetric(math.sqrt(var), Technique.STDDEV)


def estimate_sigma(
    values,
    mu: float,
    technique: Technique | str,
    sidedness: Sidedness | str = Sidedness.TWO_SIDED,
    weights=None,
) -> SigmaEstimate:
    """Uncorrected deviation estimate for one rejection stage."""
    technique, sidedness = Technique(technique), Sidedness(sidedness)
    if technique is Technique.STDDEV:
        return std_deviation(values, mu, weights)
    if sidedness is Sidedness.TWO_SIDED:
        return percentile_sigma(values, mu, technique, weights)
    pair = one_sided_sigmas(values, mu, technique, weights)
    if sidedness is Sidedness.EACH:
        return pair
    return SigmaEstimate.symmetric(min(pair.minus, pair.plus), technique)
