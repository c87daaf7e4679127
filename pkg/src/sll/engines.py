"""Vectorized batch engines behind the model classes.

Each engine advances a whole batch of independent replicates through numpy
array operations and reduces them to per-replicate observables (occupancy at
requested times, Fourier sums over positions, total cluster sizes).  Raw
trajectories never leave the engine at batch scale; the reference
single-trajectory simulators in ``models`` realize the same laws step by step
and serve as the cross-check that these optimizations preserve them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sll.analytic import OffspringLaw
from sll.kernel import SpreadOutKernel, sample_step_indices

DEFAULT_POPULATION_CAP = 10_000_000
# hard bound on simultaneously tracked particles/sites across one batch
_BATCH_PARTICLE_LIMIT = 60_000_000


@dataclass
class BatchResult:
    """Per-replicate observables produced by one engine invocation."""

    counts: np.ndarray  # (reps, n_times) occupancy
    capped: np.ndarray  # (reps,) population cap hit
    fourier: np.ndarray | None = None  # (reps, n_fourier) complex sums over positions
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# offspring stepping


def _offspring_totals(
    law: OffspringLaw, parents: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Total children for each entry of ``parents`` (array of parent counts).

    Splits each parent count multinomially over the offspring values through
    successive conditional binomials, which numpy vectorizes over the whole
    batch; the sum-of-iid-offspring law is hit exactly.
    """
    values = law.values_array()
    probs = law.probs_array()
    if values.size == 2 and values[0] == 0:
        # two-point laws need a single binomial draw
        hits = rng.binomial(parents, probs[1])
        return hits * values[1]
    remaining = parents.copy()
    remaining_p = 1.0
    total = np.zeros_like(parents)
    for v, p in zip(values[:-1], probs[:-1]):
        frac = min(1.0, p / remaining_p)
        taken = rng.binomial(remaining, frac)
        total += taken * v
        remaining -= taken
        remaining_p -= p
    total += remaining * values[-1]
    return total


def _offspring_per_particle(
    law: OffspringLaw, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Individual offspring counts for ``n`` particles (inverse-CDF draw)."""
    values = law.values_array()
    probs = law.probs_array()
    if values.size == 2 and values[0] == 0:
        return values[1] * (rng.random(n) < probs[1]).astype(np.int64)
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    return values[np.searchsorted(cum, rng.random(n), side="right")]


# ---------------------------------------------------------------------------
# Galton-Watson counts


def gw_batch_counts(
    law: OffspringLaw,
    generations,
    reps: int,
    rng: np.random.Generator,
    cap: int = DEFAULT_POPULATION_CAP,
) -> BatchResult:
    """Occupancy of ``reps`` independent critical trees at given generations."""
    gens = sorted({int(g) for g in generations})
    if gens and gens[0] < 0:
        raise ValueError("generations must be non-negative")
    col = {g: j for j, g in enumerate(gens)}
    out = np.zeros((reps, len(gens)), dtype=np.int64)
    capped = np.zeros(reps, dtype=bool)
    alive_n = np.ones(reps, dtype=np.int64)
    alive_id = np.arange(reps, dtype=np.int64)
    top = gens[-1] if gens else 0
    for g in range(top + 1):
        if g in col:
            out[alive_id, col[g]] = alive_n
        if g == top or alive_id.size == 0:
            break
        alive_n = _offspring_totals(law, alive_n, rng)
        over = alive_n > cap
        if np.any(over):
            # freeze capped replicates at the cap for every later snapshot
            for rep in alive_id[over]:
                capped[rep] = True
                for gg, j in col.items():
                    if gg > g:
                        out[rep, j] = cap
        keep = (alive_n > 0) & ~over
        alive_n = alive_n[keep]
        alive_id = alive_id[keep]
    return BatchResult(counts=out, capped=capped)


def gw_batch_progeny(
    law: OffspringLaw,
    kmax: int,
    reps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Total progeny per replicate, truncated at ``kmax``.

    Values below ``kmax`` are exact; ``kmax`` means "at least ``kmax``", which
    is all a tail estimator needs.  A tree alive at generation g has size at
    least g, so the loop terminates within ``kmax`` generations.
    """
    if kmax < 1:
        raise ValueError("kmax must be positive")
    sizes = np.ones(reps, dtype=np.int64)
    alive_n = np.ones(reps, dtype=np.int64)
    alive_id = np.arange(reps, dtype=np.int64)
    while alive_id.size:
        alive_n = _offspring_totals(law, alive_n, rng)
        sizes[alive_id] += alive_n
        keep = (alive_n > 0) & (sizes[alive_id] < kmax)
        alive_n = alive_n[keep]
        alive_id = alive_id[keep]
    return np.minimum(sizes, kmax)


# ---------------------------------------------------------------------------
# branching random walk


def brw_batch(
    law: OffspringLaw,
    kernel: SpreadOutKernel,
    generations,
    reps: int,
    rng: np.random.Generator,
    fourier: tuple[tuple[int, tuple[float, ...]], ...] = (),
    cap: int = DEFAULT_POPULATION_CAP,
) -> BatchResult:
    """Branching random walk observables for a batch of replicates.

    ``fourier`` holds ``(generation, wavevector)`` pairs; for each the engine
    records the per-replicate sum of ``exp(i k . x)`` over the generation's
    particles (with multiplicity).
    """
    gens = sorted({int(g) for g in generations} | {int(g) for g, _ in fourier})
    if gens and gens[0] < 0:
        raise ValueError("generations must be non-negative")
    top = gens[-1] if gens else 0
    if top * kernel.L > 32_000:
        raise ValueError("horizon too deep for int16 coordinates")
    count_col = {g: j for j, g in enumerate(sorted({int(g) for g in generations}))}
    out = np.zeros((reps, len(count_col)), dtype=np.int64)
    four_out = np.zeros((reps, len(fourier)), dtype=np.complex128) if fourier else None
    capped = np.zeros(reps, dtype=bool)

    pos = np.zeros((reps, kernel.d), dtype=np.int16)
    rep = np.arange(reps, dtype=np.int64)
    offsets16 = kernel.offsets.astype(np.int16)
    for g in range(top + 1):
        if g in count_col:
            counts_g = np.bincount(rep, minlength=reps)
            out[:, count_col[g]] = counts_g
            over = counts_g > cap
            if np.any(over):
                capped |= over
        if four_out is not None:
            for j, (fg, k) in enumerate(fourier):
                if fg == g and rep.size:
                    phases = pos.astype(np.float64) @ np.asarray(k, dtype=np.float64)
                    four_out[:, j] = np.bincount(
                        rep, weights=np.cos(phases), minlength=reps
                    ) + 1j * np.bincount(rep, weights=np.sin(phases), minlength=reps)
        if g == top or rep.size == 0:
            break
        children = _offspring_per_particle(law, rep.size, rng)
        pos = np.repeat(pos, children, axis=0)
        rep = np.repeat(rep, children)
        if pos.shape[0] > _BATCH_PARTICLE_LIMIT:
            raise RuntimeError("batch particle limit exceeded; reduce the batch size")
        steps = offsets16[sample_step_indices(kernel, rng, pos.shape[0])]
        pos = pos + steps
    return BatchResult(counts=out, capped=capped, fourier=four_out)


# ---------------------------------------------------------------------------
# oriented percolation


def _op_layout(kernel: SpreadOutKernel, reps: int, horizon: int):
    """Bit layout packing one lattice site and its replicate id into int64.

    Coordinate fields are sized to the light cone ``horizon * L`` (at least
    10 bits each) and the replicate id lives above them; field arithmetic
    stays carry-free because every coordinate keeps a margin of ``L`` to the
    field boundary.
    """
    bits = max(10, int(2 * horizon * kernel.L + 4).bit_length())
    bias = 1 << (bits - 1)
    coord_bits = bits * kernel.d
    rep_bits = 63 - coord_bits
    if rep_bits < 0 or reps > (1 << rep_bits):
        raise ValueError(
            f"batch of {reps} replicates at horizon {horizon} does not fit the packed layout"
        )
    return bits, bias, coord_bits


def _op_pack_origin(kernel: SpreadOutKernel, reps: int, bits: int, bias: int) -> np.ndarray:
    origin = 0
    for j in range(kernel.d):
        origin |= bias << (bits * j)
    return (np.arange(reps, dtype=np.int64) << (bits * kernel.d)) + origin


def _op_packed_deltas(kernel: SpreadOutKernel, bits: int) -> np.ndarray:
    deltas = np.zeros(kernel.support_size, dtype=np.int64)
    for j in range(kernel.d):
        deltas += kernel.offsets[:, j].astype(np.int64) << (bits * j)
    return deltas


def _op_decode(sites: np.ndarray, d: int, bits: int, bias: int) -> np.ndarray:
    mask = (1 << bits) - 1
    coords = np.empty((sites.size, d), dtype=np.int64)
    for j in range(d):
        coords[:, j] = ((sites >> (bits * j)) & mask) - bias
    return coords


def op_batch(
    kernel: SpreadOutKernel,
    p: float,
    generations,
    reps: int,
    rng: np.random.Generator,
    fourier: tuple[tuple[int, tuple[float, ...]], ...] = (),
    cap: int = DEFAULT_POPULATION_CAP,
) -> BatchResult:
    """Spread-out oriented percolation clusters for a batch of replicates.

    Sites live packed in int64 (coordinates in biased 10-bit fields, the
    replicate id above them) so deduplication per generation is one
    ``np.unique`` over the whole batch.  Each occupied site opens a
    binomial(S, p/S) number of distinct forward bonds; distinctness is
    enforced by redrawing collisions within each parent, which reproduces
    the without-replacement law exactly.
    """
    if p < 0 or p * float(kernel.probs.max()) > 1.0 + 1e-12:
        raise ValueError("bond intensity p * D(y) must lie in [0, 1]")
    gens = sorted({int(g) for g in generations} | {int(g) for g, _ in fourier})
    if gens and gens[0] < 0:
        raise ValueError("generations must be non-negative")
    top = gens[-1] if gens else 0
    bits, bias, coord_bits = _op_layout(kernel, reps, top)
    count_col = {g: j for j, g in enumerate(sorted({int(g) for g in generations}))}
    out = np.zeros((reps, len(count_col)), dtype=np.int64)
    four_out = np.zeros((reps, len(fourier)), dtype=np.complex128) if fourier else None
    capped = np.zeros(reps, dtype=bool)

    s = kernel.support_size
    p_each = p / s if kernel.family == "uniform_box" else None
    if p_each is None:
        raise ValueError("oriented percolation engine requires a uniform kernel")
    deltas = _op_packed_deltas(kernel, bits)
    sites = _op_pack_origin(kernel, reps, bits, bias)

    for g in range(top + 1):
        rep_of = sites >> coord_bits
        if g in count_col:
            counts_g = np.bincount(rep_of, minlength=reps)
            out[:, count_col[g]] = counts_g
            capped |= counts_g > cap
        if four_out is not None and sites.size:
            coords = None
            for j, (fg, k) in enumerate(fourier):
                if fg == g:
                    if coords is None:
                        coords = _op_decode(sites, kernel.d, bits, bias).astype(np.float64)
                    phases = coords @ np.asarray(k, dtype=np.float64)
                    four_out[:, j] = np.bincount(
                        rep_of, weights=np.cos(phases), minlength=reps
                    ) + 1j * np.bincount(rep_of, weights=np.sin(phases), minlength=reps)
        if g == top or sites.size == 0:
            break
        counts = rng.binomial(s, p_each, size=sites.size)
        parents = np.repeat(np.arange(sites.size, dtype=np.int64), counts)
        idx = sample_step_indices(kernel, rng, parents.size)
        # redraw until each parent's bond choices are distinct
        while True:
            key = parents * s + idx
            order = np.argsort(key, kind="stable")
            sorted_key = key[order]
            dup = order[1:][sorted_key[1:] == sorted_key[:-1]]
            if dup.size == 0:
                break
            idx[dup] = sample_step_indices(kernel, rng, dup.size)
        children = sites[parents] + deltas[idx]
        sites = np.unique(children)
        if sites.size > _BATCH_PARTICLE_LIMIT:
            raise RuntimeError("batch site limit exceeded; reduce the batch size")
    return BatchResult(counts=out, capped=capped, fourier=four_out)


def op_batch_cluster_sizes(
    kernel: SpreadOutKernel,
    p: float,
    kmax: int,
    reps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Total space-time cluster sizes, truncated at ``kmax``."""
    if kmax < 1:
        raise ValueError("kmax must be positive")
    bits, bias, coord_bits = _op_layout(kernel, reps, kmax)
    s = kernel.support_size
    p_each = p / s
    deltas = _op_packed_deltas(kernel, bits)
    sites = _op_pack_origin(kernel, reps, bits, bias)
    sizes = np.zeros(reps, dtype=np.int64)
    active = np.ones(reps, dtype=bool)
    g = 0
    while sites.size:
        rep_of = sites >> coord_bits
        sizes += np.bincount(rep_of, minlength=reps)
        done = sizes >= kmax
        if np.any(done & active):
            active &= ~done
            keep = active[rep_of]
            sites = sites[keep]
            if sites.size == 0:
                break
        g += 1
        # a replicate alive at generation g has size >= g + 1, so the loop
        # ends within kmax generations and the layout above covers the cone
        assert g < kmax
        counts = rng.binomial(s, p_each, size=sites.size)
        parents = np.repeat(np.arange(sites.size, dtype=np.int64), counts)
        idx = sample_step_indices(kernel, rng, parents.size)
        while True:
            key = parents * s + idx
            order = np.argsort(key, kind="stable")
            sorted_key = key[order]
            dup = order[1:][sorted_key[1:] == sorted_key[:-1]]
            if dup.size == 0:
                break
            idx[dup] = sample_step_indices(kernel, rng, dup.size)
        sites = np.unique(sites[parents] + deltas[idx])
    return np.minimum(sizes, kmax)


# ---------------------------------------------------------------------------
# contact process


class _UniformBuffer:
    """Chunked uniform variates from one generator, consumed sequentially."""

    __slots__ = ("rng", "buf", "pos")

    def __init__(self, rng: np.random.Generator, chunk: int = 1 << 16):
        self.rng = rng
        self.buf = rng.random(chunk)
        self.pos = 0

    def take(self) -> float:
        buf, pos = self.buf, self.pos
        if pos == buf.size:
            self.buf = buf = self.rng.random(buf.size)
            self.pos = pos = 0
        self.pos = pos + 1
        return buf[pos]


def cp_batch(
    kernel: SpreadOutKernel,
    lam: float,
    sample_times,
    reps: int,
    rng: np.random.Generator,
    cap: int = DEFAULT_POPULATION_CAP,
    collect_events: bool = False,
) -> BatchResult:
    """Contact process observables by exact event-driven simulation.

    Every infected site recovers at rate 1 and proposes infections at rate
    ``lam``, the target drawn from the step kernel; proposals onto infected
    sites are null.  The embedded chain is simulated by competing
    exponentials: with ``I`` infected the next event arrives at rate
    ``I (1 + lam)`` and a single uniform picks both the event type and the
    site, which keeps the per-event cost at a couple of stream reads.

    Returns occupancy at ``sample_times`` (the value just before any event
    at the same instant), plus per-replicate integrals of occupancy over
    ``[0, horizon]`` (``meta['integral']``), death times (``meta['death']``,
    inf while alive at the horizon) and, optionally, counts of recovery and
    infection-attempt events.
    """
    if lam < 0:
        raise ValueError("infection rate must be non-negative")
    times = np.asarray(sorted(float(t) for t in sample_times), dtype=np.float64)
    if times.size == 0 or times[0] <= 0:
        raise ValueError("sample times must be positive")
    horizon = float(times[-1])
    out = np.zeros((reps, times.size), dtype=np.int64)
    capped = np.zeros(reps, dtype=bool)
    integral = np.zeros(reps, dtype=np.float64)
    death = np.full(reps, np.inf, dtype=np.float64)
    n_recover = np.zeros(reps, dtype=np.int64)
    n_attempt = np.zeros(reps, dtype=np.int64)

    # 12-bit coordinate fields (range +-2047): one replicate is packed at a
    # time, so the replicate id needs no bits, and reaching the field edge
    # would take thousands of infection steps in one lineage
    bits = 12
    bias = 1 << (bits - 1)
    deltas = [int(x) for x in _op_packed_deltas(kernel, bits)]
    origin = 0
    for j in range(kernel.d):
        origin |= bias << (bits * j)
    s = kernel.support_size
    total_rate_factor = 1.0 + lam
    uni = _UniformBuffer(rng)
    take = uni.take
    log1p = math.log1p

    for r in range(reps):
        sites = [origin]
        index = {origin: 0}
        n = 1
        t = 0.0
        acc = 0.0
        next_sample = 0
        while True:
            rate = n * total_rate_factor
            dt = -log1p(-take()) / rate
            t_next = t + dt
            # samples in (t, t_next] see the pre-event occupancy
            while next_sample < times.size and times[next_sample] <= t_next:
                out[r, next_sample] = n
                next_sample += 1
            if t_next >= horizon:
                acc += n * (horizon - t)
                break
            acc += n * dt
            t = t_next
            u = take() * rate
            if u < n:
                # recovery; the fractional part of the uniform picks the site
                n_recover[r] += 1
                victim = int(u)
                removed_site = sites[victim]
                last_site = sites[-1]
                sites[victim] = last_site
                sites.pop()
                index[last_site] = victim
                del index[removed_site]
                n -= 1
                if n == 0:
                    death[r] = t
                    while next_sample < times.size:
                        out[r, next_sample] = 0
                        next_sample += 1
                    break
            else:
                n_attempt[r] += 1
                src = sites[int((u - n) / lam)]
                tgt = src + deltas[int(take() * s)]
                if tgt not in index:
                    index[tgt] = n
                    sites.append(tgt)
                    n += 1
                    if n > cap:
                        capped[r] = True
                        acc += n * (horizon - t)
                        while next_sample < times.size:
                            out[r, next_sample] = n
                            next_sample += 1
                        break
        integral[r] = acc
    meta = {"integral": integral, "death": death}
    if collect_events:
        meta["n_recover"] = n_recover
        meta["n_attempt"] = n_attempt
    return BatchResult(counts=out, capped=capped, meta=meta)
