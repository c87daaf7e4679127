"""Monte Carlo estimators for survival, moments and scaling constants.

Every estimator in this module follows the same replication discipline:
the requested replicate count is split into fixed-size batches, batch
``b`` draws from the counter-based stream ``(derived seed, b)``, and
partial results are merged in ascending batch order.  Workers only ever
own whole batches (``SLL_WORKERS`` controls the pool size), so the output
is a pure function of the seed and the batch plan — re-running with a
different worker count reproduces every digit.

Estimates are reported together with the analytic limit they are supposed
to approach, so callers can form "measured vs predicted" comparisons
without re-deriving normalizations.
"""

from __future__ import annotations

import math
import multiprocessing
import os
from dataclasses import dataclass

import numpy as np
from scipy import special

from .analytic import (
    ModelConstants,
    MomentSpec,
    predicted_conditional_moment,
    predicted_scaled_moment,
    sbm_fourier_moment,
)
from .stats import (
    KSResult,
    MomentAccumulator,
    derive_seed,
    ks_statistic,
    slope_with_se,
    percentile_bootstrap,
    stream,
    wilson_interval,
)

DEFAULT_BATCH_SIZE = 1 << 17
LOW_POWER_SURVIVORS = 100
# the observables here have kurtosis growing linearly with the scale n even
# in the best case (survival is ~1/n rare and the surviving mass is
# exponential), so the heavy-tail warning triggers relative to that growth
HEAVY_TAIL_KURTOSIS_PER_N = 50.0

_Z95 = float(special.ndtri(0.975))


# ---------------------------------------------------------------------------
# result containers


@dataclass(frozen=True)
class EstimateWithCI:
    """Point estimate with a 95% interval and sampling bookkeeping."""

    value: float
    stderr: float
    ci_low: float
    ci_high: float
    n_samples: int
    n_effective: int
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.stderr < 0:
            raise ValueError("stderr must be non-negative")
        slack = 1e-9 * max(1.0, abs(self.value))
        if not self.ci_low - slack <= self.value <= self.ci_high + slack:
            raise ValueError("point estimate must lie inside its interval")
        if self.n_effective > self.n_samples:
            raise ValueError("n_effective cannot exceed n_samples")


@dataclass(frozen=True)
class NormalizationContext:
    """Scaling constants plus the scale parameter n used by an estimator."""

    constants: ModelConstants
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("scale n must be a positive integer")


@dataclass(frozen=True)
class SurvivalPoint:
    n: float
    theta: EstimateWithCI
    scaled: EstimateWithCI  # n * theta


@dataclass(frozen=True)
class MomentComparison:
    spec: MomentSpec
    n: int
    estimate: EstimateWithCI
    predicted: float
    jackknife_stderr: float | None = None


@dataclass(frozen=True)
class FourierComparison:
    spec: MomentSpec
    n: int
    estimate: EstimateWithCI
    imaginary: EstimateWithCI
    predicted: float


@dataclass(frozen=True)
class YaglomEstimate:
    n: int
    samples: np.ndarray
    mean: EstimateWithCI
    ks: KSResult
    predicted_mean: float


@dataclass(frozen=True)
class ClusterTailPoint:
    k: int
    estimate: EstimateWithCI  # sqrt(k) * P(size >= k)


@dataclass(frozen=True)
class ClusterTailEstimate:
    points: tuple[ClusterTailPoint, ...]
    c_cluster: float
    n_samples: int


@dataclass(frozen=True)
class TruncatedFunctionalEstimate:
    functional_id: str
    direct: EstimateWithCI
    size_biased: EstimateWithCI


@dataclass(frozen=True)
class CalibrationResult:
    parameter: float
    slope: float
    slope_se: float
    flat: bool
    evaluations: tuple[tuple[float, float, float], ...]  # (param, slope, se)


@dataclass(frozen=True)
class ConstantsWindows:
    """Which generations feed each constant extractor."""

    plateau_times: tuple[int, ...] = (64, 128, 256)
    second_moment_times: tuple[int, ...] = (64, 128, 256)
    fourier_time: int | None = None
    fourier_wavevectors: tuple[tuple[float, ...], ...] | None = None


@dataclass(frozen=True)
class ConstantsEstimate:
    A: EstimateWithCI
    V: EstimateWithCI
    v: EstimateWithCI | None
    kolmogorov: EstimateWithCI  # 2 / (A V)
    constants: ModelConstants
    flags: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# batch plumbing


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SLL_WORKERS", "1")))
    except ValueError:
        return 1


def _map_ordered(fn, payloads: list):
    """Apply ``fn`` over payloads, in order, optionally on a process pool."""
    workers = _worker_count()
    if workers > 1 and len(payloads) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, len(payloads))) as pool:
            return list(pool.imap(fn, payloads, chunksize=1))
    return [fn(p) for p in payloads]


def _batch_plan(model, replicates: int, batch_size: int | None, horizon: int) -> list[int]:
    """Split replicates into batch sizes, respecting engine layout limits.

    The plan depends only on (replicates, batch_size, model limits), never
    on worker count, so stream assignment is reproducible.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if batch_size is None:
        batch_size = max(256, min(DEFAULT_BATCH_SIZE, -(-replicates // 32)))
    limit = getattr(model, "max_batch_reps", None)
    if callable(limit):
        batch_size = min(batch_size, limit(horizon))
    batch_size = max(1, min(batch_size, replicates))
    sizes = [batch_size] * (replicates // batch_size)
    if replicates % batch_size:
        sizes.append(replicates % batch_size)
    return sizes


def _normal_estimate(
    mean: float, se: float, n_samples: int, n_effective: int, flags: tuple[str, ...] = ()
) -> EstimateWithCI:
    return EstimateWithCI(
        value=mean,
        stderr=se,
        ci_low=mean - _Z95 * se,
        ci_high=mean + _Z95 * se,
        n_samples=n_samples,
        n_effective=n_effective,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# survival curve


def _survival_batch(args):
    model, times, reps, sub_seed, index = args
    res = model.run_batch(times, reps, stream(sub_seed, index))
    return (res.counts > 0).sum(axis=0), int(res.capped.sum())


def estimate_survival_curve(
    model, ns, replicates: int, seed: int, batch_size: int | None = None
) -> list[SurvivalPoint]:
    """Estimate survival probabilities at several times from one shared pool.

    All requested times are read off the same trajectories, which makes the
    curve exactly non-increasing.  Survival gets a Wilson interval; the
    rescaled value ``n * theta_n`` is the quantity with a finite limit.
    Capped replicates count as survivors (they were alive at the cap) and
    their number is reported through a ``capped:<count>`` flag.
    """
    ns = [float(v) for v in ns]
    plan = _batch_plan(model, replicates, batch_size, math.ceil(max(ns)) if ns else 0)
    sub_seed = derive_seed(seed, "survival")
    payloads = [(model, ns, reps, sub_seed, i) for i, reps in enumerate(plan)]
    survivors = np.zeros(len(ns), dtype=np.int64)
    cap_hits = 0
    for surv, capped in _map_ordered(_survival_batch, payloads):
        survivors += surv
        cap_hits += capped
    out = []
    base_flags: tuple[str, ...] = ("capped:%d" % cap_hits,) if cap_hits else ()
    for j, n in enumerate(ns):
        k = int(survivors[j])
        lo, hi = wilson_interval(k, replicates)
        phat = k / replicates
        se = math.sqrt(max(phat * (1.0 - phat), 0.0) / replicates)
        flags = base_flags + (("degenerate",) if k == 0 else ())
        theta = EstimateWithCI(phat, se, lo, hi, replicates, k, flags)
        scaled = EstimateWithCI(n * phat, n * se, n * lo, n * hi, replicates, k, flags)
        out.append(SurvivalPoint(n=n, theta=theta, scaled=scaled))
    return out


# ---------------------------------------------------------------------------
# scaled mass moments


def _moment_batch(args):
    model, gens, reps, sub_seed, index, n, spec_maps = args
    res = model.run_batch(gens, reps, stream(sub_seed, index))
    counts = res.counts.astype(np.float64)
    states = []
    for cols, exps in spec_maps:
        z = np.full(reps, float(n))
        for col, exp in zip(cols, exps):
            z *= (counts[:, col] / n) ** exp
        acc = MomentAccumulator()
        acc.add(z)
        states.append(acc.state())
    return states


def estimate_scaled_moments(
    model,
    ctx: NormalizationContext,
    spec,
    replicates: int,
    seed: int,
    batch_size: int | None = None,
):
    """Estimate ``n E[prod_j (N_{floor(t_j n)}/n)^{l_j}]`` for one or more specs.

    When ``spec`` is a sequence, all specs share one trajectory pool: the
    union of required generations is simulated once per batch and each
    spec reads its own columns.  Returns a :class:`MomentComparison` (or a
    list of them) carrying the matching analytic limit.
    """
    specs = [spec] if isinstance(spec, MomentSpec) else list(spec)
    if not specs:
        raise ValueError("need at least one moment spec")
    n = ctx.n
    union: list[int] = []
    per_spec = []
    for sp in specs:
        if sp.wavevectors is not None:
            raise ValueError("use estimate_fourier_rpoint for Fourier specs")
        times, exps = sp.merged()
        gens = [int(t * n) for t in times]
        cols = []
        for g in gens:
            if g not in union:
                union.append(g)
            cols.append(union.index(g))
        per_spec.append((tuple(cols), exps))
    order = sorted(range(len(union)), key=union.__getitem__)
    remap = {old: new for new, old in enumerate(order)}
    union_sorted = sorted(union)
    spec_maps = [
        (tuple(remap[c] for c in cols), exps) for cols, exps in per_spec
    ]

    plan = _batch_plan(model, replicates, batch_size, max(union_sorted))
    sub_seed = derive_seed(seed, "moments")
    payloads = [
        (model, union_sorted, reps, sub_seed, i, n, spec_maps)
        for i, reps in enumerate(plan)
    ]
    merged = [MomentAccumulator() for _ in specs]
    batch_stats: list[list[tuple[int, float]]] = [[] for _ in specs]
    for states in _map_ordered(_moment_batch, payloads):
        for j, state in enumerate(states):
            acc = MomentAccumulator.from_state(state)
            batch_stats[j].append((acc.count, acc.mean))
            merged[j] = merged[j].merge(acc)

    out = []
    for sp, acc, batches in zip(specs, merged, batch_stats):
        flags: tuple[str, ...] = ()
        kurt = acc.excess_kurtosis
        if math.isfinite(kurt) and kurt > HEAVY_TAIL_KURTOSIS_PER_N * max(1, n):
            flags += ("heavy_tail",)
        jack = None
        if sp.total_order >= 3 and len(batches) >= 2:
            jack = _jackknife_mean_se(batches)
            if jack > 0 and acc.sem > 0:
                ratio = max(jack / acc.sem, acc.sem / jack)
                if ratio > 2.0:
                    flags += ("se_mismatch",)
        est = _normal_estimate(acc.mean, acc.sem, replicates, replicates, flags)
        out.append(
            MomentComparison(
                spec=sp,
                n=n,
                estimate=est,
                predicted=predicted_scaled_moment(ctx.constants, sp),
                jackknife_stderr=jack,
            )
        )
    return out[0] if isinstance(spec, MomentSpec) else out


def _jackknife_mean_se(batches: list[tuple[int, float]]) -> float:
    """Delete-one-batch jackknife stderr of the pooled mean."""
    counts = np.array([c for c, _ in batches], dtype=np.float64)
    sums = np.array([c * m for c, m in batches], dtype=np.float64)
    total_c = counts.sum()
    total_s = sums.sum()
    loo = (total_s - sums) / (total_c - counts)
    b = len(batches)
    center = loo.mean()
    return math.sqrt((b - 1) / b * float(((loo - center) ** 2).sum()))


# ---------------------------------------------------------------------------
# Fourier-weighted moments


def _fourier_batch(args):
    model, gens, reps, sub_seed, index, pairs = args
    res = model.run_batch(gens, reps, stream(sub_seed, index), fourier=pairs)
    prod = np.ones(reps, dtype=np.complex128)
    for j in range(len(pairs)):
        prod *= res.fourier[:, j]
    re, im = MomentAccumulator(), MomentAccumulator()
    re.add(prod.real)
    im.add(prod.imag)
    return re.state(), im.state()


def estimate_fourier_rpoint(
    model,
    ctx: NormalizationContext,
    spec: MomentSpec,
    replicates: int,
    seed: int,
    batch_size: int | None = None,
) -> FourierComparison:
    """Estimate the Fourier-transformed r-point function at diffusive scale.

    Per replicate the product over spec entries of
    ``sum_x exp(i k_j . x / sqrt(v n))`` at generation ``floor(t_j n)`` is
    averaged and divided by ``A (V A^2 n)^(r-2)`` with ``r - 1`` spatial
    points.  The stream tag matches :func:`estimate_scaled_moments`, so
    zero wavevectors reproduce the mass-moment trajectories exactly.
    """
    if spec.wavevectors is None:
        raise ValueError("spec carries no wavevectors")
    kernel = getattr(model, "kernel", None)
    if kernel is None:
        raise ValueError("model has no positions to transform")
    d = kernel.d
    if any(len(k) != d for k in spec.wavevectors):
        raise ValueError("wavevector dimension must match the model")
    constants = ctx.constants
    if constants.v is None:
        raise ValueError("spatial variance v is required for Fourier scaling")
    predicted = sbm_fourier_moment(spec, d)  # also rejects r - 1 > 2
    n = ctx.n
    scale = 1.0 / math.sqrt(constants.v * n)
    pairs = tuple(
        (int(t * n), tuple(scale * c for c in k)) for t, k in spec.fourier_pairs()
    )
    gens = sorted({g for g, _ in pairs})
    r_minus_1 = len(pairs)
    norm = constants.A * (constants.branching_scale * n) ** (r_minus_1 - 1)

    plan = _batch_plan(model, replicates, batch_size, max(gens))
    sub_seed = derive_seed(seed, "moments")
    payloads = [(model, gens, reps, sub_seed, i, pairs) for i, reps in enumerate(plan)]
    re_acc, im_acc = MomentAccumulator(), MomentAccumulator()
    for re_state, im_state in _map_ordered(_fourier_batch, payloads):
        re_acc = re_acc.merge(MomentAccumulator.from_state(re_state))
        im_acc = im_acc.merge(MomentAccumulator.from_state(im_state))
    return FourierComparison(
        spec=spec,
        n=n,
        estimate=_normal_estimate(
            re_acc.mean / norm, re_acc.sem / norm, replicates, replicates
        ),
        imaginary=_normal_estimate(
            im_acc.mean / norm, im_acc.sem / norm, replicates, replicates
        ),
        predicted=predicted,
    )


# ---------------------------------------------------------------------------
# conditional moments


def _conditional_batch(args):
    model, gens, reps, sub_seed, index, n, cond_col, cols, exps = args
    res = model.run_batch(gens, reps, stream(sub_seed, index))
    counts = res.counts.astype(np.float64)
    alive = counts[:, cond_col] > 0
    z = np.ones(int(alive.sum()))
    for col, exp in zip(cols, exps):
        z *= (counts[alive, col] / n) ** exp
    acc = MomentAccumulator()
    acc.add(z)
    return acc.state()


def estimate_conditional_moments(
    model,
    ctx: NormalizationContext,
    t: float,
    spec: MomentSpec,
    replicates: int,
    seed: int,
    batch_size: int | None = None,
) -> MomentComparison:
    """Estimate ``E[prod_j (N_{floor(s_j n)}/n)^{l_j} | N_{floor(t n)} > 0]``.

    Conditioning is plain rejection on survival at the observation time;
    ``n_effective`` counts the survivors.  All spec times must be >= t so
    the analytic limit exists.  The stream tag matches
    :func:`estimate_scaled_moments`: with the same seed and time union the
    two read identical trajectories, which makes the identity
    ``E[Z | survival] * theta_hat == E[Z]`` hold to rounding.
    """
    if spec.wavevectors is not None:
        raise ValueError("conditional estimates take mass specs only")
    if any(s < t - 1e-9 for s in spec.times):
        raise ValueError("spec times must not precede the conditioning time")
    n = ctx.n
    times, exps = spec.merged()
    gens = [int(s * n) for s in times]
    cond_gen = int(t * n)
    union = sorted(set(gens) | {cond_gen})
    cond_col = union.index(cond_gen)
    cols = tuple(union.index(g) for g in gens)

    plan = _batch_plan(model, replicates, batch_size, max(union))
    sub_seed = derive_seed(seed, "moments")
    payloads = [
        (model, union, reps, sub_seed, i, n, cond_col, cols, exps)
        for i, reps in enumerate(plan)
    ]
    acc = MomentAccumulator()
    for state in _map_ordered(_conditional_batch, payloads):
        acc = acc.merge(MomentAccumulator.from_state(state))
    if acc.count == 0:
        raise RuntimeError("no replicate survived the conditioning time")
    flags = ("low_power",) if acc.count < LOW_POWER_SURVIVORS else ()
    est = _normal_estimate(acc.mean, acc.sem, replicates, acc.count, flags)
    return MomentComparison(
        spec=spec,
        n=n,
        estimate=est,
        predicted=predicted_conditional_moment(ctx.constants, t, spec),
    )


# ---------------------------------------------------------------------------
# conditional size profile


def _yaglom_batch(args):
    model, gen, reps, sub_seed, index = args
    res = model.run_batch([gen], reps, stream(sub_seed, index))
    alive = res.counts[:, 0] > 0
    return res.counts[alive, 0].astype(np.float64)


def estimate_yaglom(
    model,
    n,
    replicates: int,
    seed: int,
    constants: ModelConstants | None = None,
    batch_size: int | None = None,
) -> YaglomEstimate:
    """Conditional law of ``N_n / n`` given survival, against its exponential limit.

    The limit is exponential with mean ``V A^2 / 2``; constants default to
    the model's exact ones and must be supplied for calibrated lattice
    models.  Raises if nothing survives; flags low power below 1000
    survivors.
    """
    if constants is None:
        exact = getattr(model, "exact_constants", None)
        if exact is None:
            raise ValueError("supply constants for models without exact ones")
        constants = exact()
    mean_limit = constants.branching_scale / 2.0
    plan = _batch_plan(model, replicates, batch_size, math.ceil(n))
    sub_seed = derive_seed(seed, "yaglom")
    payloads = [(model, n, reps, sub_seed, i) for i, reps in enumerate(plan)]
    chunks = _map_ordered(_yaglom_batch, payloads)
    samples = np.concatenate(chunks) / n
    if samples.size == 0:
        raise RuntimeError("no survivors at time %s" % n)
    flags = ("low_power",) if samples.size < 1000 else ()
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(samples.size)) if samples.size > 1 else 0.0
    ks = ks_statistic(samples, lambda x: -np.expm1(-np.asarray(x) / mean_limit))
    return YaglomEstimate(
        n=int(n),
        samples=samples,
        mean=_normal_estimate(mean, se, replicates, int(samples.size), flags),
        ks=ks,
        predicted_mean=mean_limit,
    )


# ---------------------------------------------------------------------------
# cluster size tail


def _tail_batch(args):
    model, kmax, reps, sub_seed, index, ks = args
    sizes = model.run_sizes(kmax, reps, stream(sub_seed, index))
    return np.array([(sizes >= k).sum() for k in ks], dtype=np.int64)


def estimate_cluster_tail(
    model, ks, replicates: int, seed: int, batch_size: int | None = None
) -> ClusterTailEstimate:
    """Estimate ``sqrt(k) P(cluster size >= k)`` on a grid of thresholds.

    Cluster growth stops once a replicate reaches the largest threshold,
    which censors sizes from above; censored replicates still count as
    ``>= k`` for every requested k, so no tail mass is lost.  The plateau
    constant is the median of the rescaled tail over thresholds >= 1000
    (or the largest threshold when none reach 1000) and is the measured
    input for the explicit survival-bound certificate.
    """
    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise ValueError("thresholds must be positive integers")
    kmax = ks[-1]
    plan = _batch_plan(model, replicates, batch_size, 0)
    sub_seed = derive_seed(seed, "tail")
    payloads = [(model, kmax, reps, sub_seed, i, ks) for i, reps in enumerate(plan)]
    hits = np.zeros(len(ks), dtype=np.int64)
    for part in _map_ordered(_tail_batch, payloads):
        hits += part
    points = []
    for k, h in zip(ks, hits):
        lo, hi = wilson_interval(int(h), replicates)
        phat = h / replicates
        se = math.sqrt(max(phat * (1 - phat), 0.0) / replicates)
        root = math.sqrt(k)
        points.append(
            ClusterTailPoint(
                k=k,
                estimate=EstimateWithCI(
                    root * phat, root * se, root * lo, root * hi, replicates, int(h)
                ),
            )
        )
    plateau = [p.estimate.value for p in points if p.k >= min(1000, kmax)]
    return ClusterTailEstimate(
        points=tuple(points),
        c_cluster=float(np.median(plateau)),
        n_samples=replicates,
    )


# ---------------------------------------------------------------------------
# truncated functionals of the rescaled mass


_FUNCTIONALS = {
    "indicator_one": lambda y: np.ones_like(y),
    "identity_clipped": lambda y: np.minimum(y, 10.0),
    "exp_decay": lambda y: np.exp(-y),
    "zero": lambda y: np.zeros_like(y),
}


def _functional_batch(args):
    model, gens, reps, sub_seed, index, s_col, t_col, mass_scale, eta, fid = args
    res = model.run_batch(gens, reps, stream(sub_seed, index))
    x = res.counts[:, s_col] / mass_scale
    y = res.counts[:, t_col] / mass_scale
    f = (x > eta) * _FUNCTIONALS[fid](y)
    return float(f.sum()), float((f * f).sum()), float(x.sum()), reps


def estimate_truncated_functional(
    model,
    ctx: NormalizationContext,
    s: float,
    t: float,
    eta: float,
    functional_id: str,
    replicates: int,
    seed: int,
    batch_size: int | None = None,
) -> TruncatedFunctionalEstimate:
    """Estimate ``mu_n[ 1{X_s(1) > eta} H(X_t(1)) ]`` two independent ways.

    ``X_u(1) = N_{floor(un)} / (V A^2 n)`` and ``mu_n = n V A P``.  The
    direct route multiplies the empirical mean by ``n V A``; the
    size-biased route divides the truncated sum by the total mass at time
    s, using that the mass expectation under ``mu_n`` tends to one.  The
    two agree exactly when the empirical mean of ``N_{floor(sn)}`` equals
    A, so their comparison is a normalization cross-check.
    """
    if functional_id not in _FUNCTIONALS:
        raise ValueError("unknown functional id %r" % functional_id)
    if min(s, t, eta) <= 0:
        raise ValueError("s, t and eta must be positive")
    n = ctx.n
    constants = ctx.constants
    mass_scale = constants.branching_scale * n
    gens = sorted({int(s * n), int(t * n)})
    s_col = gens.index(int(s * n))
    t_col = gens.index(int(t * n))

    plan = _batch_plan(model, replicates, batch_size, max(gens))
    sub_seed = derive_seed(seed, "functional")
    payloads = [
        (model, gens, reps, sub_seed, i, s_col, t_col, mass_scale, eta, functional_id)
        for i, reps in enumerate(plan)
    ]
    rows = np.array(_map_ordered(_functional_batch, payloads))
    f_sum, f_sq, x_sum = rows[:, 0].sum(), rows[:, 1].sum(), rows[:, 2].sum()
    factor = n * constants.V * constants.A
    mean_f = f_sum / replicates
    var_f = max(f_sq / replicates - mean_f**2, 0.0)
    direct_se = factor * math.sqrt(var_f / replicates)
    direct = _normal_estimate(factor * mean_f, direct_se, replicates, replicates)

    if x_sum <= 0:
        raise RuntimeError("no mass alive at time s")
    ratio = f_sum / x_sum
    if len(rows) >= 2:
        loo = (f_sum - rows[:, 0]) / (x_sum - rows[:, 2])
        b = len(rows)
        ratio_se = math.sqrt((b - 1) / b * float(((loo - loo.mean()) ** 2).sum()))
    else:
        ratio_se = 0.0
    biased = _normal_estimate(ratio, ratio_se, replicates, replicates)
    return TruncatedFunctionalEstimate(
        functional_id=functional_id, direct=direct, size_biased=biased
    )


# ---------------------------------------------------------------------------
# criticality calibration


def _log_mean_slope(model, ns, replicates, sub_seed, batch_size):
    plan = _batch_plan(model, replicates, batch_size, max(ns))
    sums = np.zeros(len(ns))
    sq = np.zeros(len(ns))
    for i, reps in enumerate(plan):
        res = model.run_batch(ns, reps, stream(sub_seed, i))
        counts = res.counts.astype(np.float64)
        sums += counts.sum(axis=0)
        sq += (counts * counts).sum(axis=0)
    means = sums / replicates
    if np.any(means <= 0):
        raise RuntimeError("mean occupancy vanished inside the window")
    var = np.maximum(sq / replicates - means**2, 1e-300)
    se_log = np.sqrt(var / replicates) / means
    fit = slope_with_se(np.asarray(ns, dtype=float), np.log(means), 1.0 / se_log**2)
    return fit.slope, fit.slope_se


def calibrate_criticality(
    model_family,
    bracket: tuple[float, float],
    window: tuple[float, float],
    replicates: int,
    seed: int,
    batch_size: int | None = None,
    rel_tol: float = 1e-3,
    grid_points: int = 5,
) -> CalibrationResult:
    """Locate the parameter where mean occupancy neither grows nor decays.

    ``model_family`` maps a parameter to a model.  The slope of
    ``log E[N_n]`` over a geometric grid inside ``window`` is driven to
    zero by bisection; the bracket must straddle (negative slope at the
    low end, positive at the high end).  Stops at relative parameter
    precision ``rel_tol`` and reports whether the final slope is flat
    within two standard errors.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 < lo < hi:
        raise ValueError("bracket must be increasing and positive")
    ns = sorted(set(int(round(v)) for v in np.geomspace(window[0], window[1], grid_points)))
    if len(ns) < 3:
        raise ValueError("window too narrow for a slope fit")
    evaluations = []
    counter = 0

    def slope_at(param):
        nonlocal counter
        sub_seed = derive_seed(seed, "calibrate:%d" % counter)
        counter += 1
        s, se = _log_mean_slope(model_family(param), ns, replicates, sub_seed, batch_size)
        evaluations.append((param, s, se))
        return s

    slope_lo = slope_at(lo)
    slope_hi = slope_at(hi)
    if not (slope_lo < 0.0 < slope_hi):
        raise ValueError(
            "bracket does not straddle criticality: slopes %.3g and %.3g"
            % (slope_lo, slope_hi)
        )
    while hi - lo > rel_tol * 0.5 * (hi + lo):
        mid = 0.5 * (lo + hi)
        if slope_at(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    param = 0.5 * (lo + hi)
    final_slope = slope_at(param)
    _, s, se = evaluations[-1]
    return CalibrationResult(
        parameter=param,
        slope=s,
        slope_se=se,
        flat=bool(abs(s) <= 2.0 * se),
        evaluations=tuple(evaluations),
    )


# ---------------------------------------------------------------------------
# constants extraction


def _constants_batch(args):
    model, gens, reps, sub_seed, index, pairs = args
    res = model.run_batch(gens, reps, stream(sub_seed, index), fourier=pairs)
    counts = res.counts.astype(np.float64)
    row = [float(reps)]
    row.extend(counts.sum(axis=0))
    row.extend((counts**2).sum(axis=0))
    row.extend((counts**4).sum(axis=0))
    if pairs:
        row.extend(res.fourier.real.sum(axis=0))
    return row


def estimate_constants(
    model,
    windows: ConstantsWindows,
    replicates: int,
    seed: int,
    batch_size: int | None = None,
    bootstrap: int = 2000,
) -> ConstantsEstimate:
    """Extract the scaling constants (A, V, v) of a calibrated model.

    A is the inverse-variance weighted plateau of ``E[N_n]``; V comes from
    the linear growth of ``E[N_n^2]``, whose slope is ``V A^3``; v (when a
    Fourier window is given) from the Gaussian decay of the two-point
    transform at diffusive wavevectors.  Intervals are percentile
    bootstrap over batch summaries, including the derived ratio
    ``2 / (A V)``.
    """
    plateau = tuple(int(v) for v in windows.plateau_times)
    second = tuple(int(v) for v in windows.second_moment_times)
    gens = sorted(set(plateau) | set(second))
    pairs: tuple = ()
    wavevectors = ()
    if windows.fourier_time is not None:
        kernel = getattr(model, "kernel", None)
        if kernel is None:
            raise ValueError("Fourier window requires a spatial model")
        if not windows.fourier_wavevectors:
            raise ValueError("Fourier window requires wavevectors")
        wavevectors = tuple(tuple(float(c) for c in k) for k in windows.fourier_wavevectors)
        g = int(windows.fourier_time)
        scale = 1.0 / math.sqrt(g)
        pairs = tuple((g, tuple(scale * c for c in k)) for k in wavevectors)
    p_cols = [gens.index(g) for g in plateau]
    s_cols = [gens.index(g) for g in second]

    plan = _batch_plan(model, replicates, batch_size, max(gens))
    sub_seed = derive_seed(seed, "constants")
    payloads = [(model, gens, reps, sub_seed, i, pairs) for i, reps in enumerate(plan)]
    rows = np.array(_map_ordered(_constants_batch, payloads))
    if rows.shape[0] < 2:
        raise ValueError("need at least two batches for bootstrap intervals")

    g_count = len(gens)
    mean_off = 1
    sq_off = 1 + g_count
    quad_off = 1 + 2 * g_count
    fourier_off = 1 + 3 * g_count

    total = rows[:, 0].sum()
    means = rows[:, mean_off : mean_off + g_count].sum(axis=0) / total
    sqs = rows[:, sq_off : sq_off + g_count].sum(axis=0) / total
    quads = rows[:, quad_off : quad_off + g_count].sum(axis=0) / total
    # fixed weights reused inside the bootstrap statistic
    var_mean = np.maximum(sqs - means**2, 1e-300)
    w_plateau = total / var_mean[p_cols]
    var_sq = np.maximum(quads - sqs**2, 1e-300)
    w_second = total / var_sq[s_cols]
    second_ns = np.asarray(second, dtype=np.float64)

    def stat_parts(r):
        tot = r[:, 0].sum()
        m = r[:, mean_off : mean_off + g_count].sum(axis=0) / tot
        q = r[:, sq_off : sq_off + g_count].sum(axis=0) / tot
        a_hat = float(np.average(m[p_cols], weights=w_plateau))
        fit = slope_with_se(second_ns, q[s_cols], w_second)
        v_hat = fit.slope / a_hat**3
        return a_hat, v_hat

    def stat_v(r):
        tot = r[:, 0].sum()
        m = r[:, mean_off : mean_off + g_count].sum(axis=0) / tot
        a_hat = float(np.average(m[p_cols], weights=w_plateau))
        f = r[:, fourier_off:].sum(axis=0) / tot
        ratio = np.maximum(f / a_hat, 1e-300)
        xs = np.array([sum(c * c for c in k) for k in wavevectors])
        d = model.kernel.d
        return slope_with_se(xs, -2.0 * d * np.log(ratio), None).slope

    boot_seed = derive_seed(seed, "constants-boot")
    a_pt, a_lo, a_hi = percentile_bootstrap(
        rows, lambda r: stat_parts(r)[0], n_boot=bootstrap, seed=boot_seed
    )
    v_pt, v_lo, v_hi = percentile_bootstrap(
        rows, lambda r: stat_parts(r)[1], n_boot=bootstrap, seed=boot_seed
    )
    k_pt, k_lo, k_hi = percentile_bootstrap(
        rows,
        lambda r: 2.0 / math.prod(stat_parts(r)),
        n_boot=bootstrap,
        seed=boot_seed,
    )

    def make(pt, lo_, hi_, flags=()):
        se = max(hi_ - lo_, 0.0) / (2.0 * _Z95)
        return EstimateWithCI(
            pt, se, min(lo_, pt), max(hi_, pt), int(total), int(total), flags
        )

    flags: tuple[str, ...] = ()
    fit = slope_with_se(np.asarray(plateau, dtype=float), means[p_cols], w_plateau)
    if abs(fit.slope) > 2.0 * fit.slope_se:
        flags += ("no_plateau",)

    spatial = None
    if pairs:
        s_pt, s_lo, s_hi = percentile_bootstrap(
            rows, stat_v, n_boot=bootstrap, seed=boot_seed
        )
        spatial = make(s_pt, s_lo, s_hi)

    constants = ModelConstants(
        A=a_pt, V=v_pt, v=spatial.value if spatial is not None else None
    )
    return ConstantsEstimate(
        A=make(a_pt, a_lo, a_hi, flags),
        V=make(v_pt, v_lo, v_hi),
        v=spatial,
        kolmogorov=make(k_pt, k_lo, k_hi),
        constants=constants,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# sample-size planning


def replicates_for_survivors(
    n: float, target_survivors: int, constants: ModelConstants, margin: float = 1.3
) -> int:
    """Replicates needed so that about ``target_survivors`` reach time n.

    Uses the asymptotic survival probability ``2 / (A V n)`` with a safety
    margin; no importance sampling is involved anywhere, so rare survival
    is paid for with plain replication.
    """
    if target_survivors < 1 or margin <= 0:
        raise ValueError("need a positive target and margin")
    theta = 2.0 / (constants.A * constants.V * n)
    return int(math.ceil(target_survivors * margin / theta))
