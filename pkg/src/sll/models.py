"""Cluster models: branching, branching random walk, percolation, contact process.

Each model class is a small picklable value object exposing two views of the
same law:

* ``run_batch`` / ``run_sizes``: vectorized engines reducing many replicates
  to per-replicate observables (used by every estimator);
* ``simulate``: a deliberately plain single-trajectory reference
  implementation returning a full :class:`~sll.trajectory.Trajectory`.

The reference implementations are the ground truth for what the engines are
supposed to compute faster; tests hold the two against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sll.analytic import ModelConstants, OffspringLaw
from sll.engines import (
    DEFAULT_POPULATION_CAP,
    BatchResult,
    brw_batch,
    cp_batch,
    gw_batch_counts,
    gw_batch_progeny,
    op_batch,
    op_batch_cluster_sizes,
)
from sll.kernel import (
    SpreadOutKernel,
    kernel_variance,
    sample_forward_children,
    sample_step,
)
from sll.trajectory import Trajectory


def _as_generations(times) -> list[int]:
    gens = []
    for t in times:
        g = int(round(float(t)))
        if abs(float(t) - g) > 1e-9 or g < 0:
            raise ValueError(f"discrete-time model needs non-negative integer times, got {t}")
        gens.append(g)
    return gens


@dataclass(frozen=True)
class GaltonWatsonModel:
    """Critical (or near-critical) branching process without space."""

    law: OffspringLaw

    kind = "gw"
    is_spatial = False
    continuous_time = False

    def run_batch(
        self,
        times,
        reps: int,
        rng: np.random.Generator,
        cap: int = DEFAULT_POPULATION_CAP,
        fourier=(),
    ) -> BatchResult:
        if fourier:
            raise ValueError("a branching process has no positions to transform")
        return gw_batch_counts(self.law, _as_generations(times), reps, rng, cap)

    def run_sizes(self, kmax: int, reps: int, rng: np.random.Generator) -> np.ndarray:
        return gw_batch_progeny(self.law, kmax, reps, rng)

    def exact_constants(self) -> ModelConstants:
        """Constants are known in closed form: ``A = 1`` and ``V = gamma``."""
        return ModelConstants(A=1.0, V=self.law.gamma)

    def simulate(
        self,
        horizon: int,
        rng: np.random.Generator,
        cap: int = DEFAULT_POPULATION_CAP,
    ) -> Trajectory:
        """Reference generation-by-generation simulation of one tree."""
        values = self.law.values_array()
        cum = np.cumsum(self.law.probs_array())
        cum[-1] = 1.0
        counts = [1]
        n = 1
        censored = False
        for _ in range(horizon):
            if n == 0:
                counts.append(0)
                continue
            children = values[np.searchsorted(cum, rng.random(n), side="right")]
            n = int(children.sum())
            if n > cap:
                censored = True
                counts.append(cap)
                break
            counts.append(n)
        counts_arr = np.array(counts, dtype=np.int64)
        times = np.arange(counts_arr.size, dtype=np.float64)
        alive = np.flatnonzero(counts_arr > 0)
        return Trajectory(
            times=times,
            counts=counts_arr,
            survival_time=float(alive[-1]),
            cluster_size=float(counts_arr.sum()),
            censored=censored,
        )

    def to_json(self) -> dict:
        return {"model": self.kind, "values": list(self.law.values), "probs": list(self.law.probs)}


@dataclass(frozen=True)
class BranchingRandomWalkModel:
    """Critical branching random walk: branching tree plus kernel steps."""

    law: OffspringLaw
    kernel: SpreadOutKernel

    kind = "brw"
    is_spatial = True
    continuous_time = False

    def run_batch(
        self,
        times,
        reps: int,
        rng: np.random.Generator,
        cap: int = DEFAULT_POPULATION_CAP,
        fourier=(),
    ) -> BatchResult:
        fourier_pairs = tuple((int(round(float(g))), tuple(k)) for g, k in fourier)
        return brw_batch(
            self.law, self.kernel, _as_generations(times), reps, rng, fourier_pairs, cap
        )

    def run_sizes(self, kmax: int, reps: int, rng: np.random.Generator) -> np.ndarray:
        # steps never change how many particles there are, so the total
        # progeny law is exactly that of the underlying branching process
        return gw_batch_progeny(self.law, kmax, reps, rng)

    def exact_constants(self) -> ModelConstants:
        return ModelConstants(A=1.0, V=self.law.gamma, v=kernel_variance(self.kernel))

    def simulate(
        self,
        horizon: int,
        rng: np.random.Generator,
        cap: int = DEFAULT_POPULATION_CAP,
        keep_level_sets: bool = True,
    ) -> Trajectory:
        """Reference particle-by-particle simulation of one walk cloud."""
        values = self.law.values_array()
        cum = np.cumsum(self.law.probs_array())
        cum[-1] = 1.0
        pos = np.zeros((1, self.kernel.d), dtype=np.int64)
        counts = [1]
        levels = [pos.copy()] if keep_level_sets else None
        censored = False
        for _ in range(horizon):
            n = pos.shape[0]
            if n == 0:
                counts.append(0)
                if levels is not None:
                    levels.append(np.zeros((0, self.kernel.d), dtype=np.int64))
                continue
            children = values[np.searchsorted(cum, rng.random(n), side="right")]
            pos = np.repeat(pos, children, axis=0)
            if pos.shape[0] > cap:
                censored = True
                break
            if pos.shape[0]:
                pos = pos + sample_step(self.kernel, rng, size=pos.shape[0])
            counts.append(pos.shape[0])
            if levels is not None:
                levels.append(pos.copy())
        counts_arr = np.array(counts, dtype=np.int64)
        times = np.arange(counts_arr.size, dtype=np.float64)
        alive = np.flatnonzero(counts_arr > 0)
        return Trajectory(
            times=times,
            counts=counts_arr,
            survival_time=float(alive[-1]),
            cluster_size=float(counts_arr.sum()),
            censored=censored,
            level_sets=levels,
        )

    def to_json(self) -> dict:
        return {
            "model": self.kind,
            "values": list(self.law.values),
            "probs": list(self.law.probs),
            **self.kernel.to_json(),
        }


@dataclass(frozen=True)
class OrientedPercolationModel:
    """Spread-out oriented percolation with bond intensity ``p / S``."""

    kernel: SpreadOutKernel
    p: float

    kind = "op"
    is_spatial = True
    continuous_time = False

    def __post_init__(self) -> None:
        if self.p < 0 or self.p * float(self.kernel.probs.max()) > 1.0 + 1e-12:
            raise ValueError("bond intensity p * D(y) must lie in [0, 1]")

    def max_batch_reps(self, horizon: int = 0) -> int:
        """Largest replicate batch the packed site layout can address."""
        bits = max(10, int(2 * horizon * self.kernel.L + 4).bit_length())
        return 1 << max(0, 63 - bits * self.kernel.d)

    def run_batch(
        self,
        times,
        reps: int,
        rng: np.random.Generator,
        cap: int = DEFAULT_POPULATION_CAP,
        fourier=(),
    ) -> BatchResult:
        fourier_pairs = tuple((int(round(float(g))), tuple(k)) for g, k in fourier)
        return op_batch(
            self.kernel, self.p, _as_generations(times), reps, rng, fourier_pairs, cap
        )

    def run_sizes(self, kmax: int, reps: int, rng: np.random.Generator) -> np.ndarray:
        return op_batch_cluster_sizes(self.kernel, self.p, kmax, reps, rng)

    def simulate(
        self,
        horizon: int,
        rng: np.random.Generator,
        cap: int = DEFAULT_POPULATION_CAP,
        keep_level_sets: bool = True,
    ) -> Trajectory:
        """Reference site-by-site exploration of one cluster."""
        current = {(0,) * self.kernel.d}
        counts = [1]
        levels = [np.array(sorted(current), dtype=np.int64)] if keep_level_sets else None
        censored = False
        size = 1
        for _ in range(horizon):
            nxt: set = set()
            for site in current:
                children = sample_forward_children(self.kernel, self.p, rng)
                for off in children:
                    nxt.add(tuple(int(c) for c in (np.array(site) + off)))
            if len(nxt) > cap:
                censored = True
                break
            current = nxt
            size += len(current)
            counts.append(len(current))
            if levels is not None:
                pts = (
                    np.array(sorted(current), dtype=np.int64)
                    if current
                    else np.zeros((0, self.kernel.d), dtype=np.int64)
                )
                levels.append(pts)
            if not current:
                # extend the zero tail lazily only if someone records longer
                break
        counts_arr = np.array(counts, dtype=np.int64)
        times = np.arange(counts_arr.size, dtype=np.float64)
        alive = np.flatnonzero(counts_arr > 0)
        return Trajectory(
            times=times,
            counts=counts_arr,
            survival_time=float(alive[-1]),
            cluster_size=float(size),
            censored=censored,
            level_sets=levels,
        )

    def to_json(self) -> dict:
        return {"model": self.kind, **self.kernel.to_json(), "p": self.p}


@dataclass(frozen=True)
class ContactProcessModel:
    """Contact process: recovery at rate 1, infection attempts at rate lambda."""

    kernel: SpreadOutKernel
    lam: float

    kind = "cp"
    is_spatial = True
    continuous_time = True

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("infection rate must be non-negative")

    def run_batch(
        self,
        times,
        reps: int,
        rng: np.random.Generator,
        cap: int = DEFAULT_POPULATION_CAP,
        fourier=(),
        collect_events: bool = False,
    ) -> BatchResult:
        if fourier:
            raise ValueError("Fourier observables are not wired up for the contact process")
        return cp_batch(self.kernel, self.lam, times, reps, rng, cap, collect_events)

    def run_sizes(self, kmax: float, reps: int, rng: np.random.Generator) -> np.ndarray:
        # occupancy is at least 1 while alive, so by time kmax the integral
        # either reached kmax or the cluster has died: one horizon suffices
        res = cp_batch(self.kernel, self.lam, [float(kmax)], reps, rng)
        return np.minimum(res.meta["integral"], float(kmax))

    def simulate(
        self,
        sample_times,
        rng: np.random.Generator,
        cap: int = DEFAULT_POPULATION_CAP,
    ) -> Trajectory:
        """One trajectory on an explicit observation grid."""
        res = cp_batch(self.kernel, self.lam, sample_times, 1, rng, cap)
        times = np.asarray(sorted(float(t) for t in sample_times), dtype=np.float64)
        death = float(res.meta["death"][0])
        horizon = float(times[-1])
        return Trajectory(
            times=times,
            counts=res.counts[0],
            survival_time=min(death, horizon),
            cluster_size=float(res.meta["integral"][0]),
            censored=bool(res.capped[0]),
        )

    def to_json(self) -> dict:
        return {"model": self.kind, **self.kernel.to_json(), "lambda": self.lam}
