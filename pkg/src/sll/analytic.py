"""Exact numerics for critical branching and its scaling limit.

Two families of closed forms live here, deliberately side by side so they can
be played against each other in tests:

* finite-system exactness for Galton-Watson processes with a finite offspring
  law: survival probabilities by generating-function iteration, joint moments
  of generation sizes by exact propagation, and the total-progeny law via the
  random-walk (ballot/rotation) representation;
* limit-object exactness for the total-mass diffusion started from the
  canonical cluster measure: survival mass, single- and multi-time moments,
  diffusively scaled Fourier moments, and the Laplace transform of the
  transition law, plus exact samplers for both.

Moments of the limit measure are reported in the standard normalization in
which the unit-time mass has first moment 1 and second moment 1 at time 1;
``predicted_scaled_moment`` rescales them with model constants ``(A, V)`` to
give the value a lattice-model estimator should approach.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_MOMENT_ORDER = 6


# ---------------------------------------------------------------------------
# offspring laws


@dataclass(frozen=True)
class OffspringLaw:
    """Finite-support offspring distribution for a branching process.

    ``require_critical`` pins the mean to 1 (the regime all limit statements
    are about); calibration sweeps construct slightly off-critical members of
    a family with the flag released.
    """

    values: tuple[int, ...]
    probs: tuple[float, ...]
    require_critical: bool = True

    def __post_init__(self) -> None:
        values = tuple(int(v) for v in self.values)
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)
        if len(values) != len(probs) or not values:
            raise ValueError("values and probs must be equal-length and non-empty")
        if any(v < 0 for v in values):
            raise ValueError("offspring counts must be non-negative")
        if list(values) != sorted(set(values)):
            raise ValueError("values must be strictly increasing")
        if any(p <= 0 for p in probs):
            raise ValueError("probabilities must be positive")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1")
        if self.require_critical:
            if abs(self.mean - 1.0) > 1e-12:
                raise ValueError(f"offspring mean is {self.mean}, not 1")
            if self.variance <= 0.0:
                raise ValueError("degenerate critical law (variance 0) is excluded")

    @property
    def mean(self) -> float:
        return float(sum(v * p for v, p in zip(self.values, self.probs)))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(sum((v - m) ** 2 * p for v, p in zip(self.values, self.probs)))

    @property
    def gamma(self) -> float:
        """Offspring variance; the only law parameter the limit laws see."""
        return self.variance

    @property
    def max_value(self) -> int:
        return self.values[-1]

    def raw_moment(self, j: int) -> float:
        return float(sum(v ** j * p for v, p in zip(self.values, self.probs)))

    def pgf(self, s: float) -> float:
        return float(sum(p * s ** v for v, p in zip(self.values, self.probs)))

    def values_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.int64)

    def probs_array(self) -> np.ndarray:
        return np.array(self.probs, dtype=np.float64)

    def dense_probs(self) -> np.ndarray:
        """Probabilities on the full range 0..max_value (zeros filled in)."""
        dense = np.zeros(self.max_value + 1, dtype=np.float64)
        for v, p in zip(self.values, self.probs):
            dense[v] = p
        return dense

    @classmethod
    def binary(cls) -> "OffspringLaw":
        """0 or 2 children with equal probability; variance 1."""
        return cls(values=(0, 2), probs=(0.5, 0.5))

    @classmethod
    def binary_family(cls, mu: float) -> "OffspringLaw":
        """0 or 2 children with mean ``mu``; critical exactly at ``mu = 1``."""
        if not 0.0 < mu < 2.0:
            raise ValueError("binary family needs mean in (0, 2)")
        return cls(values=(0, 2), probs=(1.0 - mu / 2.0, mu / 2.0), require_critical=False)


# ---------------------------------------------------------------------------
# model constants and moment specifications


@dataclass(frozen=True)
class ModelConstants:
    """Scaling constants of a critical lattice model.

    A: limiting expected generation size (plateau of ``E[N_n]``).
    V: vertex factor; ``V A^2`` plays the role the offspring variance plays
       for a plain branching process.
    v: spatial step variance entering diffusive scaling (None for models
       without space).
    """

    A: float
    V: float
    v: float | None = None

    def __post_init__(self) -> None:
        if self.A <= 0 or self.V <= 0:
            raise ValueError("constants A and V must be positive")
        if self.v is not None and self.v <= 0:
            raise ValueError("spatial variance v must be positive when given")

    @property
    def branching_scale(self) -> float:
        """``V A^2``, the effective offspring variance of the model."""
        return self.V * self.A * self.A


@dataclass(frozen=True)
class MomentSpec:
    """Which product of (possibly Fourier-weighted) masses to look at.

    ``times`` are macroscopic: an estimator at scale ``n`` reads generation
    ``floor(t * n)`` for each entry.  ``exponents`` are the powers attached to
    each time; ``wavevectors``, when present, attach one spatial frequency to
    each time and turn the mass moment into a Fourier moment.
    """

    times: tuple[float, ...]
    exponents: tuple[int, ...]
    wavevectors: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        exponents = tuple(int(e) for e in self.exponents)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "exponents", exponents)
        if len(times) != len(exponents) or not times:
            raise ValueError("times and exponents must be equal-length and non-empty")
        if any(t <= 0 for t in times):
            raise ValueError("times must be positive")
        if any(e < 0 for e in exponents):
            raise ValueError("exponents must be non-negative")
        if self.total_order == 0:
            raise ValueError("at least one exponent must be positive")
        if self.wavevectors is not None:
            wv = tuple(tuple(float(c) for c in k) for k in self.wavevectors)
            object.__setattr__(self, "wavevectors", wv)
            if len(wv) != len(times):
                raise ValueError("wavevectors must align with times")
            dims = {len(k) for k in wv}
            if len(dims) != 1:
                raise ValueError("wavevectors must share one dimension")

    @property
    def total_order(self) -> int:
        return sum(self.exponents)

    def merged(self) -> tuple[tuple[float, ...], tuple[int, ...]]:
        """Times sorted ascending with duplicate times merged, zeros dropped."""
        if self.wavevectors is not None:
            raise ValueError("cannot merge a Fourier spec by time")
        acc: dict[float, int] = {}
        for t, e in zip(self.times, self.exponents):
            if e > 0:
                acc[t] = acc.get(t, 0) + e
        ts = tuple(sorted(acc))
        return ts, tuple(acc[t] for t in ts)

    def fourier_pairs(self) -> tuple[tuple[float, tuple[float, ...]], ...]:
        """Expand exponents into repeated ``(time, wavevector)`` pairs, sorted by time."""
        if self.wavevectors is None:
            raise ValueError("spec has no wavevectors")
        pairs = []
        for t, e, k in zip(self.times, self.exponents, self.wavevectors):
            pairs.extend([(t, k)] * e)
        return tuple(sorted(pairs, key=lambda p: p[0]))


# ---------------------------------------------------------------------------
# partition and Stirling machinery (shared by the exact moment formulas)


def _integer_partitions(m: int) -> list[tuple[int, ...]]:
    """All partitions of ``m`` as non-increasing tuples."""
    out: list[tuple[int, ...]] = []

    def rec(remaining: int, cap: int, prefix: tuple[int, ...]) -> None:
        if remaining == 0:
            out.append(prefix)
            return
        for part in range(min(cap, remaining), 0, -1):
            rec(remaining - part, part, prefix + (part,))

    rec(m, m, ())
    return out


def _set_partition_count(block_sizes: tuple[int, ...]) -> int:
    """Number of set partitions of ``[m]`` whose block sizes form this multiset."""
    m = sum(block_sizes)
    count = math.factorial(m)
    for s in block_sizes:
        count //= math.factorial(s)
    mult: dict[int, int] = {}
    for s in block_sizes:
        mult[s] = mult.get(s, 0) + 1
    for c in mult.values():
        count //= math.factorial(c)
    return count


@lru_cache(maxsize=None)
def _stirling_first_signed(n: int) -> tuple[tuple[float, ...], ...]:
    """Signed Stirling numbers s(r, j): ``(x)_r = sum_j s(r, j) x^j``."""
    table = [[0.0] * (n + 1) for _ in range(n + 1)]
    table[0][0] = 1.0
    for r in range(1, n + 1):
        for j in range(r + 1):
            upper = table[r - 1][j - 1] if j >= 1 else 0.0
            table[r][j] = upper - (r - 1) * table[r - 1][j]
    return tuple(tuple(row) for row in table)


@lru_cache(maxsize=None)
def _compound_sum_table(raw_moments: tuple[float, ...]) -> tuple[tuple[float, ...], ...]:
    """Moment transfer matrix for a sum of iid terms with the given raw moments.

    Row ``j`` gives coefficients ``T[j][r]`` such that for any count variable
    ``X``: ``E[(sum_{i<=X} Y_i)^j] = sum_r T[j][r] E[(X)_r]`` with ``(X)_r``
    the falling factorial.  Standard set-partition expansion of the power of
    a sum: blocks of a partition pick which terms coincide.
    """
    order = len(raw_moments) - 1
    table = [[0.0] * (order + 1) for _ in range(order + 1)]
    table[0][0] = 1.0
    for j in range(1, order + 1):
        for lam in _integer_partitions(j):
            coeff = float(_set_partition_count(lam))
            for s in lam:
                coeff *= raw_moments[s]
            table[j][len(lam)] += coeff
    return tuple(tuple(row) for row in table)


def _falling_to_power(coeffs_by_falling: np.ndarray) -> np.ndarray:
    """Convert ``sum_r a_r (x)_r`` into plain power-basis coefficients."""
    order = coeffs_by_falling.size - 1
    s1 = _stirling_first_signed(order)
    out = np.zeros(order + 1)
    for r in range(order + 1):
        a = coeffs_by_falling[r]
        if a != 0.0:
            for j in range(r + 1):
                out[j] += a * s1[r][j]
    return out


# ---------------------------------------------------------------------------
# Galton-Watson exact numerics


def gw_survival_exact(law: OffspringLaw, n: int) -> float:
    """Exact ``P(N_n > 0)`` by iterating the generating function.

    ``theta_n = 1 - f(f(...f(0)))`` with ``n`` applications of the offspring
    generating function ``f``.
    """
    if n < 0:
        raise ValueError("generation must be non-negative")
    return gw_survival_profile(law, (n,))[0]


def gw_survival_profile(law: OffspringLaw, generations) -> np.ndarray:
    """Exact survival probabilities at several generations in one pass."""
    gens = [int(g) for g in generations]
    if any(g < 0 for g in gens):
        raise ValueError("generations must be non-negative")
    top = max(gens) if gens else 0
    want = set(gens)
    theta: dict[int, float] = {}
    s = 0.0
    if 0 in want:
        theta[0] = 1.0
    for g in range(1, top + 1):
        s = law.pgf(s)
        if g in want:
            theta[g] = 1.0 - s
    return np.array([theta[g] for g in gens], dtype=np.float64)


def _gw_raw_moment_profile(
    law: OffspringLaw, generations: set[int], order: int
) -> dict[int, np.ndarray]:
    """Raw moments ``E[N_g^j]``, j = 0..order, at the requested generations.

    Propagates the raw-moment vector one generation at a time: conditioning
    on ``N_g``, the next generation is a sum of ``N_g`` iid offspring counts,
    so powers transfer through the set-partition table and falling-factorial
    moments of ``N_g``.
    """
    if order > MAX_MOMENT_ORDER:
        raise ValueError(f"moment order capped at {MAX_MOMENT_ORDER}")
    xi_raw = tuple(law.raw_moment(j) for j in range(order + 1))
    transfer = _compound_sum_table(xi_raw)
    s1 = _stirling_first_signed(order)
    top = max(generations) if generations else 0
    raw = np.ones(order + 1, dtype=np.float64)  # N_0 = 1
    out: dict[int, np.ndarray] = {}
    if 0 in generations:
        out[0] = raw.copy()
    for g in range(1, top + 1):
        falling = np.array(
            [sum(s1[r][j] * raw[j] for j in range(r + 1)) for r in range(order + 1)]
        )
        raw = np.array(
            [sum(transfer[j][r] * falling[r] for r in range(j + 1)) for j in range(order + 1)]
        )
        if g in generations:
            out[g] = raw.copy()
    return out


def gw_joint_moments_exact(law: OffspringLaw, generations, exponents) -> float:
    """Exact ``E[prod_j N_{g_j}^{l_j}]`` for a finite critical (or near-critical) law.

    Works outside-in: the largest generation is reduced to a polynomial in the
    previous one via the Markov transfer of powers, repeatedly, until only the
    earliest generation remains; its raw moments finish the job.  Total order
    is capped at ``MAX_MOMENT_ORDER``.
    """
    gens = [int(g) for g in generations]
    exps = [int(e) for e in exponents]
    if len(gens) != len(exps) or not gens:
        raise ValueError("generations and exponents must be equal-length and non-empty")
    if any(g < 0 for g in gens) or any(e < 0 for e in exps):
        raise ValueError("generations and exponents must be non-negative")
    acc: dict[int, int] = {}
    for g, e in zip(gens, exps):
        if e > 0:
            acc[g] = acc.get(g, 0) + e
    if not acc:
        raise ValueError("at least one exponent must be positive")
    order = sum(acc.values())
    if order > MAX_MOMENT_ORDER:
        raise ValueError(f"total moment order capped at {MAX_MOMENT_ORDER}")
    gs = sorted(acc)
    ms = [acc[g] for g in gs]
    needed = {gs[0]} | {gs[i + 1] - gs[i] for i in range(len(gs) - 1)}
    profiles = _gw_raw_moment_profile(law, needed, order)

    def conditional_coeffs(m: int, gap: int) -> np.ndarray:
        # E[N_{g+gap}^m | N_g = x] as power-basis coefficients in x.
        raw_gap = profiles[gap]
        transfer = _compound_sum_table(tuple(raw_gap[: m + 1]))
        by_falling = np.array(transfer[m][: m + 1])
        return _falling_to_power(by_falling)

    poly = np.zeros(order + 1)
    poly[ms[-1]] = 1.0
    for i in range(len(gs) - 2, -1, -1):
        gap = gs[i + 1] - gs[i]
        reduced = np.zeros(order + 1)
        for power in range(1, order + 1):
            a = poly[power]
            if a != 0.0:
                c = conditional_coeffs(power, gap)
                reduced[: c.size] += a * c
        reduced_shifted = np.zeros(order + 1)
        reduced_shifted[ms[i] :] = reduced[: order + 1 - ms[i]]
        poly = reduced_shifted
    root_raw = profiles[gs[0]]
    return float(sum(poly[j] * root_raw[j] for j in range(order + 1)))


def gw_progeny_distribution(law: OffspringLaw, kmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact total-progeny law up to ``kmax``: ``(pmf, tail)``.

    Uses the random-walk representation of the exploration of the family
    tree: ``P(|C| = j) = (1/j) P(xi_1 + ... + xi_j = j - 1)``, the rotation
    (ballot) identity for first passage of the increment walk.  ``pmf[j]``
    is ``P(|C| = j)`` for ``1 <= j <= kmax``; ``tail[k] = P(|C| >= k)`` is
    exact for ``k <= kmax`` even though the support continues beyond.
    """
    if kmax < 1:
        raise ValueError("kmax must be at least 1")
    if kmax > 200_000:
        raise ValueError("kmax too large for dense convolution (limit 200000)")
    dense = law.dense_probs()
    pmf = np.zeros(kmax + 1, dtype=np.float64)
    conv = np.ones(1, dtype=np.float64)  # law of xi_1 + ... + xi_j, starting at j = 0
    for j in range(1, kmax + 1):
        conv = np.convolve(conv, dense)[: kmax + 1]
        if j - 1 < conv.size:
            pmf[j] = conv[j - 1] / j
    cdf = np.cumsum(pmf)
    tail = np.empty(kmax + 1, dtype=np.float64)
    tail[0] = 1.0
    tail[1:] = 1.0 - cdf[:-1]
    return pmf, tail


def gw_progeny_tail_exact(law: OffspringLaw, k: int) -> float:
    """Exact ``P(total progeny >= k)``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    _, tail = gw_progeny_distribution(law, k)
    return float(tail[k])


# ---------------------------------------------------------------------------
# limit-object numerics


def sbm_survival(t: float) -> float:
    """Canonical-measure mass of survival to time ``t``: ``2 / t``."""
    if t <= 0:
        raise ValueError("time must be positive")
    return 2.0 / t


def kolmogorov_limit(gamma: float) -> float:
    """Limit of ``n P(N_n > 0)`` for a critical law with offspring variance ``gamma``."""
    if gamma <= 0:
        raise ValueError("offspring variance must be positive")
    return 2.0 / gamma


def yaglom_mean(gamma: float) -> float:
    """Mean of the exponential limit of ``N_n / n`` given survival."""
    if gamma <= 0:
        raise ValueError("offspring variance must be positive")
    return gamma / 2.0


def _feller_conditional_coeffs(m: int, tau: float) -> np.ndarray:
    """Power-basis coefficients of ``E[X_{s+tau}^m | X_s = x]``.

    ``E[X_{s+tau}^m | x] = sum_{r=1}^m (m!/r!) C(m-1, r-1) (tau/2)^{m-r} x^r``;
    equivalently the compound-Poisson representation of the transition law
    (a Poisson(2x/tau) number of exponential(tau/2) clusters).
    """
    coeffs = np.zeros(m + 1)
    if m == 0:
        coeffs[0] = 1.0
        return coeffs
    half = tau / 2.0
    for r in range(1, m + 1):
        coeffs[r] = (
            math.factorial(m) / math.factorial(r) * math.comb(m - 1, r - 1) * half ** (m - r)
        )
    return coeffs


def sbm_mass_moment(spec: MomentSpec) -> float:
    """Canonical-measure moment ``N0[prod_j X_{t_j}^{l_j}]`` (standard normalization).

    Single time: ``m! (t/2)^{m-1}``.  Several times are handled outside-in
    through the exact conditional moment polynomial of the mass diffusion;
    the result is symmetric under permutations of the ``(time, exponent)``
    pairs and duplicate times merge by adding exponents.
    """
    if spec.wavevectors is not None:
        raise ValueError("use sbm_fourier_moment for Fourier specs")
    order = spec.total_order
    if order > MAX_MOMENT_ORDER:
        raise ValueError(f"total moment order capped at {MAX_MOMENT_ORDER}")
    ts, ms = spec.merged()
    poly = np.zeros(order + 1)
    poly[ms[-1]] = 1.0
    for i in range(len(ts) - 2, -1, -1):
        tau = ts[i + 1] - ts[i]
        reduced = np.zeros(order + 1)
        for power in range(1, order + 1):
            a = poly[power]
            if a != 0.0:
                c = _feller_conditional_coeffs(power, tau)
                reduced[: c.size] += a * c
        shifted = np.zeros(order + 1)
        shifted[ms[i] :] = reduced[: order + 1 - ms[i]]
        poly = shifted
    t1 = ts[0]
    # N0[X_t^j] = j! (t/2)^{j-1}; the constant term is always zero here.
    return float(
        sum(poly[j] * math.factorial(j) * (t1 / 2.0) ** (j - 1) for j in range(1, order + 1))
    )


def sbm_conditional_moment(t: float, spec: MomentSpec) -> float:
    """``E[prod_j X_{s_j}^{l_j} | X_t > 0]`` under the canonical measure.

    Observation times must sit entirely on one side of the conditioning
    time.  With all ``s_j >= t`` the conditional law is the total-mass
    diffusion started from the exponential entrance law at ``t``, and the
    moment propagates backward through the transition polynomials.  With
    all ``s_j <= t``: when the latest observation sits at ``t`` the
    survival indicator is absorbed by the moment itself; for a single
    earlier time the exact survival correction
    ``1 - (1 + s/(t-s))^{-(m+1)}`` applies; multi-time specs strictly
    before ``t`` are not supported.
    """
    if t <= 0:
        raise ValueError("conditioning time must be positive")
    ts, ms = spec.merged()
    order = sum(ms)
    if order > MAX_MOMENT_ORDER:
        raise ValueError(f"total moment order capped at {MAX_MOMENT_ORDER}")
    if ts[-1] <= t + 1e-12:
        if abs(ts[-1] - t) <= 1e-12:
            numerator = sbm_mass_moment(spec)
        elif len(ts) == 1:
            s, m = ts[0], ms[0]
            lam = 2.0 / (t - s)
            correction = 1.0 - (1.0 + lam * s / 2.0) ** (-(m + 1))
            numerator = math.factorial(m) * (s / 2.0) ** (m - 1) * correction
        else:
            raise ValueError(
                "multi-time conditional moments need the latest observation at the conditioning time"
            )
        return numerator / sbm_survival(t)
    if ts[0] < t - 1e-12:
        raise ValueError(
            "observation times must lie entirely on one side of the conditioning time"
        )
    # forward case: chain the transition polynomials down to time t, then
    # average over the entrance law, exponential with mean t/2
    chain_ts = ts if abs(ts[0] - t) <= 1e-12 else (t,) + ts
    chain_ms = ms if abs(ts[0] - t) <= 1e-12 else (0,) + ms
    poly = np.zeros(order + 1)
    poly[chain_ms[-1]] = 1.0
    for i in range(len(chain_ts) - 2, -1, -1):
        tau = chain_ts[i + 1] - chain_ts[i]
        reduced = np.zeros(order + 1)
        for power in range(1, order + 1):
            a = poly[power]
            if a != 0.0:
                c = _feller_conditional_coeffs(power, tau)
                reduced[: c.size] += a * c
        reduced[0] += poly[0]
        shifted = np.zeros(order + 1)
        shifted[chain_ms[i] :] = reduced[: order + 1 - chain_ms[i]]
        poly = shifted
    return float(
        sum(poly[j] * math.factorial(j) * (t / 2.0) ** j for j in range(order + 1))
    )


def predicted_scaled_moment(constants: ModelConstants, spec: MomentSpec) -> float:
    """Limit of ``n E[prod_j (N_{floor(t_j n)} / n)^{l_j}]`` for a lattice model.

    The model enters only through ``A`` and the branching scale ``V A^2``:
    the value is ``A (V A^2)^{sum l - 1}`` times the standard-normalization
    canonical moment at the same macroscopic times.
    """
    scale = constants.branching_scale
    return constants.A * scale ** (spec.total_order - 1) * sbm_mass_moment(spec)


def predicted_conditional_moment(constants: ModelConstants, t: float, spec: MomentSpec) -> float:
    """Limit of ``E[prod_j (N_{floor(s_j n)}/n)^{l_j} | N_{floor(tn)} > 0]``."""
    scale = constants.branching_scale
    return scale ** spec.total_order * sbm_conditional_moment(t, spec)


def _adaptive_simpson(f, a: float, b: float, rel_tol: float = 1e-8, abs_floor: float = 1e-12):
    """Adaptive Simpson quadrature with Richardson acceptance."""

    def simpson(x0, x2, f0, f1, f2):
        return (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    def rec(x0, x2, f0, f1, f2, whole, tol, depth):
        xm = 0.5 * (x0 + x2)
        xl = 0.5 * (x0 + xm)
        xr = 0.5 * (xm + x2)
        fl = f(xl)
        fr = f(xr)
        left = simpson(x0, xm, f0, fl, f1)
        right = simpson(xm, x2, f1, fr, f2)
        err = left + right - whole
        if depth <= 0 or abs(err) <= 15.0 * tol:
            return left + right + err / 15.0
        return rec(x0, xm, f0, fl, f1, left, tol / 2.0, depth - 1) + rec(
            xm, x2, f1, fr, f2, right, tol / 2.0, depth - 1
        )

    if b <= a:
        return 0.0
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = simpson(a, b, fa, fm, fb)
    tol = max(abs_floor, rel_tol * abs(whole))
    return rec(a, b, fa, fm, fb, whole, tol, 48)


def sbm_fourier_moment(spec: MomentSpec, d: int) -> float:
    """Diffusively scaled Fourier moments of the canonical measure.

    With one observation point the value is ``exp(-|k|^2 t / (2d))``.  With
    two points ``(s, k1)`` and ``(t, k2)``, ``s <= t``, the tree has a single
    branch point at a time ``u <= s`` integrated out::

        int_0^s exp(-|k1+k2|^2 u / 2d) exp(-|k1|^2 (s-u) / 2d)
                exp(-|k2|^2 (t-u) / 2d) du

    At zero wavevectors this reduces to the mass moments (1 and ``s``).
    """
    if d < 1:
        raise ValueError("dimension must be at least 1")
    pairs = spec.fourier_pairs()
    if any(len(k) != d for _, k in pairs):
        raise ValueError("wavevector dimension must match d")
    r_minus_1 = len(pairs)
    if r_minus_1 == 1:
        t, k = pairs[0]
        k2 = sum(c * c for c in k)
        return math.exp(-k2 * t / (2.0 * d))
    if r_minus_1 == 2:
        (s, k1), (t, k2vec) = pairs
        a1 = sum(c * c for c in k1) / (2.0 * d)
        a2 = sum(c * c for c in k2vec) / (2.0 * d)
        a12 = sum((c1 + c2) ** 2 for c1, c2 in zip(k1, k2vec)) / (2.0 * d)

        def integrand(u: float) -> float:
            return math.exp(-a12 * u - a1 * (s - u) - a2 * (t - u))

        return float(_adaptive_simpson(integrand, 0.0, s))
    raise ValueError("Fourier moments implemented for one or two observation points")


# ---------------------------------------------------------------------------
# total-mass diffusion: transition law, exact samplers


def feller_transition_laplace(x: float, tau: float, lam: float) -> float:
    """``E[exp(-lam X_{s+tau}) | X_s = x]`` for the total-mass diffusion.

    Equals ``exp(-x lam / (1 + lam tau / 2))``; composing two gaps reproduces
    a single gap exactly, which is the semigroup check used in verification.
    """
    if x < 0 or tau < 0 or lam < 0:
        raise ValueError("x, tau and lam must be non-negative")
    return math.exp(-x * lam / (1.0 + lam * tau / 2.0))


def feller_exact_sample(
    x: float, tau: float, rng: np.random.Generator, size: int | None = None
) -> np.ndarray | float:
    """Exact draw of ``X_{s+tau}`` given ``X_s = x``.

    The transition law is compound Poisson: a Poisson(2x/tau) number of
    surviving sub-populations, each of exponential(tau/2) mass.  Matching
    Laplace transforms shows this is exact, absorption at 0 included.
    """
    if x < 0 or tau < 0:
        raise ValueError("x and tau must be non-negative")
    scalar = size is None
    m = 1 if scalar else int(size)
    if tau == 0.0:
        out = np.full(m, x, dtype=np.float64)
        return float(out[0]) if scalar else out
    counts = rng.poisson(2.0 * x / tau, size=m)
    out = np.zeros(m, dtype=np.float64)
    positive = counts > 0
    if np.any(positive):
        out[positive] = rng.gamma(shape=counts[positive], scale=tau / 2.0)
    return float(out[0]) if scalar else out


def feller_entrance_sample(
    t: float, rng: np.random.Generator, size: int | None = None
) -> np.ndarray | float:
    """Draw ``X_t`` under the canonical measure conditioned on ``X_t > 0``.

    The conditional law is exponential with mean ``t / 2``.
    """
    if t <= 0:
        raise ValueError("time must be positive")
    scalar = size is None
    out = rng.exponential(scale=t / 2.0, size=1 if scalar else int(size))
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# weak survival bound certificate


@dataclass(frozen=True)
class WeakBoundCertificate:
    """Explicit constants certifying ``theta_n <= c_plus / n``.

    ``c2`` is the smallest constant (at least 1) closing the induction step
    on the quadrupling scale: with the cluster-tail constant ``C_cluster``
    and the survival-proxy constant ``C_theta``, the step needs

        2^{-1/2} C_cluster c2^{2/3} + C_theta c2^{2/3} <= c2 / 4,

    whose minimal solution is ``c2 = (4 (C_cluster / sqrt(2) + C_theta))^3``.
    ``epsilon = c2^{-4/3}`` is the cluster-size cut used in the step and
    ``c_plus = 4 c2`` the constant valid at every scale, not only powers of 4.
    """

    c_cluster: float
    c_theta: float
    c2: float
    epsilon: float
    c_plus: float
    residual: float

    @property
    def holds(self) -> bool:
        return self.residual <= 1e-9 * max(1.0, self.c2)


def certify_weak_bound(c_cluster: float, c_theta: float) -> WeakBoundCertificate:
    """Compute the explicit induction constants for the weak survival bound."""
    if c_cluster <= 0 or c_theta <= 0:
        raise ValueError("certificate constants must be positive")
    base = 4.0 * (c_cluster / math.sqrt(2.0) + c_theta)
    c2 = max(1.0, base ** 3)
    epsilon = c2 ** (-4.0 / 3.0)
    lhs = (c_cluster / math.sqrt(2.0) + c_theta) * c2 ** (2.0 / 3.0)
    residual = lhs - c2 / 4.0
    return WeakBoundCertificate(
        c_cluster=float(c_cluster),
        c_theta=float(c_theta),
        c2=float(c2),
        epsilon=float(epsilon),
        c_plus=float(4.0 * c2),
        residual=float(residual),
    )
