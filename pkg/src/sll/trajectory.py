"""Trajectory record shared by all cluster models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    """One simulated cluster, reduced to its time-indexed occupancy.

    ``times`` holds generation numbers for discrete models or the sampling
    grid for continuous-time ones; ``counts[i]`` is the number of occupied
    sites at ``times[i]``.  ``level_sets``, when kept, holds the occupied
    positions per recorded time: a multiset (array with repeats) for
    branching random walk, a set-like deduplicated array for percolation.

    ``survival_time`` is the last time the cluster was seen alive (the
    horizon, if it outlived the observation window); ``cluster_size`` counts
    every occupied space-time site for discrete models and the time integral
    of the occupancy for continuous ones.  ``censored`` marks trajectories
    stopped early by the population cap; their later counts are frozen and
    survival-type statistics must treat them as alive.
    """

    times: np.ndarray
    counts: np.ndarray
    survival_time: float
    cluster_size: float
    censored: bool = False
    level_sets: list | None = None
    meta: dict = field(default_factory=dict)

    @property
    def alive_at_end(self) -> bool:
        return bool(self.counts[-1] > 0) or self.censored


def validate_trajectory(traj: Trajectory, L: int | None = None) -> None:
    """Raise ``ValueError`` if a trajectory breaks a structural invariant.

    Checks: the root is a single particle at time zero (when time zero is
    recorded); occupancy never resurrects after hitting zero; level sets, if
    present, match the counts and stay inside the light cone ``|x| <= L t``;
    sizes and survival times are mutually consistent.
    """
    times = np.asarray(traj.times, dtype=np.float64)
    counts = np.asarray(traj.counts)
    if times.ndim != 1 or times.shape != counts.shape:
        raise ValueError("times and counts must be 1-d arrays of equal length")
    if times.size == 0:
        raise ValueError("trajectory must record at least one time")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    if times[0] == 0.0 and counts[0] != 1:
        raise ValueError("a cluster starts from a single occupied site")
    alive = counts > 0
    if np.any(~alive[:-1] & alive[1:]):
        raise ValueError("occupancy must not resurrect after extinction")
    if traj.cluster_size < 0:
        raise ValueError("cluster size must be non-negative")
    if not traj.censored:
        alive_times = times[alive]
        last_alive = float(alive_times[-1]) if alive_times.size else float(times[0])
        if traj.survival_time + 1e-9 < last_alive:
            raise ValueError("survival_time earlier than an observed alive time")
    if traj.level_sets is not None:
        if len(traj.level_sets) != times.size:
            raise ValueError("level_sets must align with times")
        for t, c, level in zip(times, counts, traj.level_sets):
            pts = np.asarray(level)
            n = 0 if pts.size == 0 else pts.shape[0]
            if n != c:
                raise ValueError(f"level set at time {t} has {n} points, counts say {c}")
            if L is not None and n > 0 and np.max(np.abs(pts)) > L * t:
                raise ValueError(f"positions at time {t} escape the light cone")
