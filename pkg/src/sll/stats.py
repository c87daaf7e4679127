"""Statistical substrate: reproducible streams, mergeable moments, intervals.

Everything downstream that touches randomness or error bars goes through this
module, so the reproducibility contract lives here: a simulation is addressed
by a 64-bit ``seed`` plus a ``stream_id``, and the resulting generator is
independent of how work is split across processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 output mixer (a strong 64-bit bijection)."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(seed: int, tag: int | str) -> int:
    """Derive an independent 64-bit sub-seed for a named stage of a pipeline.

    Stages of one experiment (calibration, production, bootstrap, ...) must
    not share streams; mixing the stage tag through splitmix64 keeps the
    derivation collision-resistant without any global registry.  String tags
    are folded byte by byte (``hash()`` is salted per process, so it would
    break reproducibility).
    """
    if isinstance(tag, str):
        folded = 0
        for byte in tag.encode("utf-8"):
            folded = _splitmix64(folded ^ byte)
        tag = folded
    return _splitmix64(_splitmix64(seed & _MASK64) ^ ((tag & _MASK64) * _GOLDEN & _MASK64))


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Return the counter-based generator for ``(seed, stream_id)``.

    Philox is keyed directly with the pair, so any worker can construct any
    stream in O(1) without coordinating with the others; identical inputs give
    bitwise-identical output on every platform numpy supports.
    """
    key = np.array([seed & _MASK64, stream_id & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class RandomStreamSpec:
    """Address of one reproducible random stream."""

    seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        return stream(self.seed, self.stream_id)


class MomentAccumulator:
    """Streaming central moments up to order four, mergeable across workers.

    Uses the pairwise update of Chan/Golub/LeVeque extended to third and
    fourth moments (Pebay).  ``merge`` is associative, so partial accumulators
    produced by independent batches can be combined in a fixed order to give
    results that do not depend on how many workers produced them.
    """

    __slots__ = ("count", "mean", "m2", "m3", "m4")

    def __init__(self) -> None:
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.m3 = 0.0
        self.m4 = 0.0

    def add(self, xs: np.ndarray) -> "MomentAccumulator":
        """Fold a batch of samples into the accumulator."""
        xs = np.asarray(xs, dtype=np.float64).ravel()
        if xs.size == 0:
            return self
        n = xs.size
        mean = float(xs.mean())
        d = xs - mean
        d2 = d * d
        other = MomentAccumulator()
        other.count = n
        other.mean = mean
        other.m2 = float(d2.sum())
        other.m3 = float((d2 * d).sum())
        other.m4 = float((d2 * d2).sum())
        self.merge(other)
        return self

    def add_value(self, x: float) -> "MomentAccumulator":
        other = MomentAccumulator()
        other.count = 1
        other.mean = float(x)
        self.merge(other)
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        """Combine ``other`` into ``self`` (in place); returns ``self``."""
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self.mean = other.mean
            self.m2 = other.m2
            self.m3 = other.m3
            self.m4 = other.m4
            return self
        na, nb = self.count, other.count
        n = na + nb
        d = other.mean - self.mean
        d2 = d * d
        na_f, nb_f, n_f = float(na), float(nb), float(n)
        m2 = self.m2 + other.m2 + d2 * na_f * nb_f / n_f
        m3 = (
            self.m3
            + other.m3
            + d * d2 * na_f * nb_f * (na_f - nb_f) / (n_f * n_f)
            + 3.0 * d * (na_f * other.m2 - nb_f * self.m2) / n_f
        )
        m4 = (
            self.m4
            + other.m4
            + d2 * d2 * na_f * nb_f * (na_f * na_f - na_f * nb_f + nb_f * nb_f) / (n_f ** 3)
            + 6.0 * d2 * (na_f * na_f * other.m2 + nb_f * nb_f * self.m2) / (n_f * n_f)
            + 4.0 * d * (na_f * other.m3 - nb_f * self.m3) / n_f
        )
        self.mean = self.mean + d * nb_f / n_f
        self.count = n
        self.m2, self.m3, self.m4 = m2, m3, m4
        return self

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        if self.count < 2:
            return float("nan")
        return self.m2 / (self.count - 1)

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    @property
    def sem(self) -> float:
        """Standard error of the mean."""
        if self.count < 2:
            return float("nan")
        return math.sqrt(self.variance / self.count)

    @property
    def skewness(self) -> float:
        if self.count < 3 or self.m2 == 0.0:
            return float("nan")
        n = float(self.count)
        return math.sqrt(n) * self.m3 / self.m2 ** 1.5

    @property
    def excess_kurtosis(self) -> float:
        if self.count < 4 or self.m2 == 0.0:
            return float("nan")
        n = float(self.count)
        return n * self.m4 / (self.m2 * self.m2) - 3.0

    def copy(self) -> "MomentAccumulator":
        out = MomentAccumulator()
        out.merge(self)
        return out

    def state(self) -> tuple[int, float, float, float, float]:
        return (self.count, self.mean, self.m2, self.m3, self.m4)

    @classmethod
    def from_state(cls, state) -> "MomentAccumulator":
        out = cls()
        out.count, out.mean, out.m2, out.m3, out.m4 = state
        return out

    def __repr__(self) -> str:  # pragma: no cover
        return f"MomentAccumulator(count={self.count}, mean={self.mean:.6g}, var={self.variance:.6g})"


def wilson_interval(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion.

    Behaves sensibly at the boundaries (0 or ``trials`` successes), unlike the
    normal-approximation interval, which is why survival probabilities deep in
    the tail are reported with it.
    """
    if trials <= 0:
        raise ValueError("wilson_interval needs at least one trial")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    z = float(special.ndtri(0.5 + level / 2.0))
    n = float(trials)
    phat = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (phat + z2 / (2.0 * n)) / denom
    half = (z / denom) * math.sqrt(phat * (1.0 - phat) / n + z2 / (4.0 * n * n))
    # at the boundaries the exact endpoints are 0 and 1; avoid roundoff pulling
    # the interval off the point estimate
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return (lo, hi)


@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float
    n: int


def ks_statistic(sample: np.ndarray, cdf) -> KSResult:
    """One-sample Kolmogorov–Smirnov test against a fully specified CDF.

    Returns the exact sup-distance of the empirical CDF from ``cdf`` and the
    asymptotic p-value ``P(K > sqrt(n) D)``.  Intended for the sample sizes
    used here (thousands), where the asymptotic law is accurate.
    """
    xs = np.sort(np.asarray(sample, dtype=np.float64))
    n = xs.size
    if n == 0:
        raise ValueError("empty sample")
    f = np.asarray(cdf(xs), dtype=np.float64)
    if f.min() < -1e-12 or f.max() > 1.0 + 1e-12:
        raise ValueError("cdf values escaped [0, 1]")
    grid = np.arange(1, n + 1, dtype=np.float64) / n
    d_plus = float(np.max(grid - f))
    d_minus = float(np.max(f - (grid - 1.0 / n)))
    d = max(d_plus, d_minus)
    pvalue = float(special.kolmogorov(math.sqrt(n) * d))
    return KSResult(statistic=d, pvalue=pvalue, n=n)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    slope_se: float
    intercept_se: float


def slope_with_se(x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> SlopeFit:
    """Weighted least-squares line fit with a standard error for the slope.

    ``weights``, when given, are inverse variances of the ``y`` values and are
    taken literally: the parameter covariance is ``(X^T W X)^{-1}`` with no
    residual rescaling.  Without weights the usual homoskedastic residual
    estimate is used.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least two points to fit a line")
    if weights is None:
        w = np.ones_like(x)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape or np.any(w <= 0):
            raise ValueError("weights must be positive and match x in shape")
    sw = w.sum()
    xbar = float((w * x).sum() / sw)
    ybar = float((w * y).sum() / sw)
    dx = x - xbar
    sxx = float((w * dx * dx).sum())
    if sxx == 0.0:
        raise ValueError("x values are degenerate")
    slope = float((w * dx * (y - ybar)).sum() / sxx)
    intercept = ybar - slope * xbar
    if weights is None:
        resid = y - (intercept + slope * x)
        if n > 2:
            s2 = float((resid * resid).sum() / (n - 2))
        else:
            s2 = 0.0
        slope_var = s2 / sxx
        intercept_var = s2 * (1.0 / n + xbar * xbar / sxx)
    else:
        slope_var = 1.0 / sxx
        intercept_var = 1.0 / sw + xbar * xbar / sxx
    return SlopeFit(
        slope=slope,
        intercept=float(intercept),
        slope_se=math.sqrt(slope_var),
        intercept_se=math.sqrt(intercept_var),
    )


def percentile_bootstrap(
    rows: np.ndarray,
    statistic,
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float, float]:
    """Percentile bootstrap over batch-level summaries.

    ``rows`` holds one row of sufficient statistics per independent batch and
    ``statistic`` maps a stack of rows to a scalar.  Resampling batches rather
    than raw samples keeps the cost independent of the replicate count and is
    the right granularity for ratio estimates formed from merged accumulators.
    Returns ``(point, lo, hi)``.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    nb = rows.shape[0]
    if nb < 2:
        raise ValueError("need at least two batches to bootstrap")
    point = float(statistic(rows))
    rng = stream(seed, 0xB0057)
    idx = rng.integers(0, nb, size=(n_boot, nb))
    vals = np.empty(n_boot, dtype=np.float64)
    for b in range(n_boot):
        vals[b] = statistic(rows[idx[b]])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(vals, [alpha, 1.0 - alpha])
    return point, float(lo), float(hi)


def jackknife_se(rows: np.ndarray, statistic) -> float:
    """Delete-one-batch jackknife standard error of ``statistic(rows)``.

    Used as a cross-check on accumulator-based standard errors when the
    underlying summands are heavy-tailed enough that fourth-moment noise makes
    the naive error bar itself unreliable.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    nb = rows.shape[0]
    if nb < 2:
        raise ValueError("need at least two batches to jackknife")
    vals = np.empty(nb, dtype=np.float64)
    mask = np.ones(nb, dtype=bool)
    for b in range(nb):
        mask[b] = False
        vals[b] = statistic(rows[mask])
        mask[b] = True
    mean = vals.mean()
    return float(math.sqrt((nb - 1) / nb * ((vals - mean) ** 2).sum()))
