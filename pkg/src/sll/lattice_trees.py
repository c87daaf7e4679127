"""Exhaustive enumeration of small lattice trees and the shell survival bound.

A lattice tree is a finite connected set of bonds with no cycles, where a
bond joins two sites whose difference carries positive step-kernel mass.
Every tree T containing the origin gets the weight

    W(T) = z^{#bonds} * prod_(x,y) D(y - x),

and the truncated ensemble of all such trees with at most ``max_bonds``
bonds is a finite measure with total mass ``rho_truncated``.  Within that
ensemble we can compute survival probabilities (existence of a vertex at
tree distance n from the origin) exactly, and check the conditional bound

    P(survive to depth n | shell up to depth m) <= N_m * rho * theta_{n-m}

for every realized depth-m shell.  The bound compares growing beyond depth
n against planting a fresh, unconstrained tree at each of the N_m shell
vertices; dropping the mutual-avoidance constraints only increases the
right-hand side, so the inequality holds at every activity z, and the
check below confirms it with exact enumeration.

Enumeration uses a canonical-parent rule (a tree is produced only by
removing its largest removable leaf bond), so every tree is generated
exactly once without a dedup table.
"""

from __future__ import annotations

from array import array
from dataclasses import dataclass, field

import numpy as np

from .kernel import SpreadOutKernel

MAX_TREE_COUNT = 10_000_000


@dataclass
class SelfRepellenceReport:
    """Outcome of the conditional survival bound over one (m, n) pair."""

    m: int
    n: int
    max_ratio: float
    n_classes: int
    passed: bool


@dataclass
class LatticeTreeEnsemble:
    """All lattice trees containing the origin with at most ``max_bonds`` bonds.

    Trees are stored in flat packed arrays: tree ``t`` owns the slice
    ``bond_ptr[t]:bond_ptr[t+1]`` of ``bond_keys``/``bond_depths``, with
    bonds sorted by (depth, key) so that the depth-m shell of the tree is
    a prefix of the slice.  ``level_counts[t, m]`` is the number of
    vertices of tree ``t`` at tree distance m from the origin, and
    ``survival[t]`` is the largest occupied depth.
    """

    kernel: SpreadOutKernel
    z: float
    max_bonds: int
    weights: np.ndarray
    bond_counts: np.ndarray
    survival: np.ndarray
    level_counts: np.ndarray
    bond_keys: np.ndarray
    bond_depths: np.ndarray
    bond_ptr: np.ndarray
    _shell_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_trees(self) -> int:
        return int(self.weights.size)

    @property
    def rho_truncated(self) -> float:
        """Total weight of the ensemble; the normalizing constant."""
        return float(self.weights.sum())

    def counts_by_bond_number(self) -> np.ndarray:
        return np.bincount(self.bond_counts, minlength=self.max_bonds + 1)

    def surviving_weight(self, n: int) -> float:
        """Total weight of trees reaching tree distance at least ``n``."""
        if n <= 0:
            return self.rho_truncated
        return float(self.weights[self.survival >= n].sum())

    def _shell_groups(self, m: int):
        """Group trees by their depth-m shell (the sub-tree of depth <= m).

        Returns ``(w_total, w_surv_suffix, shell_sizes)`` over shell
        classes: total weight per class, per-class weight of trees with
        survival >= n for each n (suffix-summed), and N_m of the shell.
        Only the most recent m is cached; the arrays for a level can be
        tens of MB for large ensembles.
        """
        if m in self._shell_cache:
            return self._shell_cache[m]
        b_top = self.max_bonds
        within = self.bond_depths <= m
        cs = np.concatenate([[0], np.cumsum(within)])
        cuts = cs[self.bond_ptr[1:]] - cs[self.bond_ptr[:-1]]
        keys = self.bond_keys
        ptr = self.bond_ptr
        index: dict[bytes, int] = {}
        owner = np.empty(self.n_trees, dtype=np.int64)
        for t in range(self.n_trees):
            p = ptr[t]
            sig = keys[p : p + cuts[t]].tobytes()
            gid = index.get(sig)
            if gid is None:
                gid = len(index)
                index[sig] = gid
            owner[t] = gid
        n_groups = len(index)
        w_total = np.zeros(n_groups)
        by_survival = np.zeros((n_groups, b_top + 1))
        np.add.at(w_total, owner, self.weights)
        np.add.at(by_survival, (owner, self.survival), self.weights)
        w_surv_suffix = np.cumsum(by_survival[:, ::-1], axis=1)[:, ::-1]
        shell_sizes = np.zeros(n_groups, dtype=np.int64)
        shell_sizes[owner] = self.level_counts[:, m]
        self._shell_cache.clear()
        self._shell_cache[m] = (w_total, w_surv_suffix, shell_sizes)
        return self._shell_cache[m]


def _packing(kernel: SpreadOutKernel, max_bonds: int):
    """Integer packing of sites reachable within ``max_bonds`` steps."""
    bias = max_bonds * kernel.L
    coord_bits = int(2 * bias + 2).bit_length()
    vertex_bits = coord_bits * kernel.d
    if 2 * vertex_bits > 63:
        raise ValueError(
            "packed layout exceeds 63 bits (d=%d, L=%d, max_bonds=%d)"
            % (kernel.d, kernel.L, max_bonds)
        )
    shifts = [coord_bits * i for i in range(kernel.d)]
    origin = sum(bias << s for s in shifts)
    deltas = []
    for row in kernel.offsets:
        off = tuple(int(c) for c in row)
        packed = sum(int(c) << s for c, s in zip(off, shifts))
        deltas.append((packed, kernel.mass[off]))
    return origin, deltas, vertex_bits


def _enumerate(kernel: SpreadOutKernel, z: float, max_bonds: int, on_tree):
    """Walk every tree once, calling ``on_tree(state)`` at each node.

    ``on_tree`` receives the mutable state ``(bonds, levels, weight)``
    where ``bonds`` holds (key, depth, u, v) tuples and must not retain
    references across calls.
    """
    origin, deltas, vertex_bits = _packing(kernel, max_bonds)
    neighborhoods: dict[int, list[tuple[int, int, float]]] = {}

    def neighborhood(u: int):
        cached = neighborhoods.get(u)
        if cached is None:
            cached = []
            for delta, d_mass in deltas:
                v = u + delta
                lo, hi = (u, v) if u < v else (v, u)
                cached.append((v, (hi << vertex_bits) | lo, z * d_mass))
            neighborhoods[u] = cached
        return cached

    vertex_list = [origin]
    vertex_set = {origin}
    degree = {origin: 0}
    depth_of = {origin: 0}
    levels = [1]
    bonds: list[tuple[int, int, int, int]] = []

    def extend(weight: float) -> None:
        on_tree(bonds, levels, weight)
        if len(bonds) == max_bonds:
            return
        # removable leaf bonds: one endpoint has degree 1 and is not the root
        eligible = []
        for key, _, a, b in bonds:
            wit_a = degree[a] == 1 and a != origin
            wit_b = degree[b] == 1 and b != origin
            if wit_a or wit_b:
                eligible.append((key, a if wit_a else None, b if wit_b else None))
        eligible.sort(reverse=True)
        for u in list(vertex_list):
            # a new bond is accepted only if it beats every leaf bond that
            # stays removable after u picks up one more edge
            threshold = -1
            for key, wa, wb in eligible:
                if (wa is not None and wa != u) or (wb is not None and wb != u):
                    threshold = key
                    break
            depth_v = depth_of[u] + 1
            for v, key, w_bond in neighborhood(u):
                if key <= threshold or v in vertex_set:
                    continue
                vertex_set.add(v)
                vertex_list.append(v)
                degree[u] += 1
                degree[v] = 1
                depth_of[v] = depth_v
                if depth_v == len(levels):
                    levels.append(1)
                else:
                    levels[depth_v] += 1
                bonds.append((key, depth_v, u, v))
                extend(weight * w_bond)
                bonds.pop()
                if levels[depth_v] == 1 and depth_v == len(levels) - 1:
                    levels.pop()
                else:
                    levels[depth_v] -= 1
                del depth_of[v]
                del degree[v]
                degree[u] -= 1
                vertex_list.pop()
                vertex_set.remove(v)

    extend(1.0)


def _estimate_tree_count(kernel: SpreadOutKernel, z: float, max_bonds: int) -> float:
    """Geometric projection of the total count from the first few levels."""
    probe = min(3, max_bonds)
    per_level = [0] * (probe + 1)

    def count(bonds, levels, weight):
        per_level[len(bonds)] += 1

    _enumerate(kernel, z, probe, count)
    total = float(sum(per_level))
    if max_bonds > probe and per_level[probe - 1] > 0:
        ratio = per_level[probe] / per_level[probe - 1]
        tail = float(per_level[probe])
        for _ in range(max_bonds - probe):
            tail *= ratio
            total += tail
    return total


def enumerate_lattice_trees(
    kernel: SpreadOutKernel,
    z: float,
    max_bonds: int,
    count_limit: int = MAX_TREE_COUNT,
) -> LatticeTreeEnsemble:
    """Enumerate every lattice tree containing the origin with <= max_bonds bonds.

    The weight of a tree is z^bonds times the product of step-kernel
    masses over its bonds.  Enumeration refuses to start when a geometric
    projection from the first levels estimates more than ``count_limit``
    trees, and aborts if the actual count crosses the limit.
    """
    if max_bonds < 0:
        raise ValueError("max_bonds must be >= 0")
    if z <= 0:
        raise ValueError("activity z must be positive")
    projected = _estimate_tree_count(kernel, z, max_bonds)
    if projected > count_limit:
        raise ValueError(
            "estimated tree count %.3g exceeds limit %d" % (projected, count_limit)
        )

    weights = array("d")
    bond_counts = array("B")
    survival = array("B")
    level_rows = array("H")
    keys_flat = array("q")
    depths_flat = array("B")
    width = max_bonds + 1
    count = 0

    def record(bonds, levels, weight):
        nonlocal count
        count += 1
        if count > count_limit:
            raise RuntimeError("tree count exceeded limit %d" % count_limit)
        weights.append(weight)
        bond_counts.append(len(bonds))
        survival.append(len(levels) - 1)
        level_rows.extend(levels)
        level_rows.extend([0] * (width - len(levels)))
        ordered = sorted((dep, key) for key, dep, _, _ in bonds)
        depths_flat.extend(dep for dep, _ in ordered)
        keys_flat.extend(key for _, key in ordered)

    _enumerate(kernel, z, max_bonds, record)

    bond_counts_arr = np.frombuffer(bond_counts, dtype=np.uint8).astype(np.int64)
    bond_ptr = np.concatenate([[0], np.cumsum(bond_counts_arr)])
    return LatticeTreeEnsemble(
        kernel=kernel,
        z=z,
        max_bonds=max_bonds,
        weights=np.frombuffer(weights, dtype=np.float64).copy(),
        bond_counts=bond_counts_arr,
        survival=np.frombuffer(survival, dtype=np.uint8).astype(np.int64),
        level_counts=np.frombuffer(level_rows, dtype=np.uint16)
        .astype(np.int64)
        .reshape(count, width),
        bond_keys=np.frombuffer(keys_flat, dtype=np.int64).copy(),
        bond_depths=np.frombuffer(depths_flat, dtype=np.uint8).copy(),
        bond_ptr=bond_ptr,
    )


def lt_survival_and_levels(
    ensemble: LatticeTreeEnsemble, n: int
) -> tuple[float, np.ndarray]:
    """Probability that a weighted tree reaches depth n, plus level sizes.

    Returns ``(theta_n, level_counts)`` where ``theta_n`` is the weight
    fraction of trees with a vertex at tree distance >= n and
    ``level_counts[t, m]`` counts the depth-m vertices of tree t.
    """
    if n < 0:
        raise ValueError("depth must be >= 0")
    if n > ensemble.max_bonds:
        return 0.0, ensemble.level_counts
    theta = ensemble.surviving_weight(n) / ensemble.rho_truncated
    return theta, ensemble.level_counts


def verify_self_repellence_lt(
    ensemble: LatticeTreeEnsemble, m: int, n: int
) -> SelfRepellenceReport:
    """Check the conditional shell-survival bound over every depth-m shell.

    For each realized shell tau (the sub-tree spanned by depths <= m) with
    N_m(tau) > 0 vertices at depth m, compares the exact conditional
    probability of reaching depth n against N_m * rho * theta_{n-m} and
    reports the worst ratio.  Shells with N_m = 0 are dead by depth m, so
    both sides vanish and they are excluded from the class count.
    """
    if not 0 <= m < n <= ensemble.max_bonds:
        raise ValueError("need 0 <= m < n <= max_bonds")
    w_total, w_surv_suffix, shell_sizes = ensemble._shell_groups(m)
    live = shell_sizes > 0
    if not np.any(live):
        raise ValueError("no shell class is alive at depth %d" % m)
    rhs = shell_sizes[live] * ensemble.surviving_weight(n - m)
    lhs = w_surv_suffix[live, n] / w_total[live]
    ratios = lhs / rhs
    max_ratio = float(ratios.max())
    return SelfRepellenceReport(
        m=m,
        n=n,
        max_ratio=max_ratio,
        n_classes=int(live.sum()),
        passed=bool(max_ratio <= 1.0 + 1e-12),
    )
