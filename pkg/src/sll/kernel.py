"""Spread-out step kernels on the integer lattice.

A kernel is a symmetric probability mass function ``D`` on a finite box
``[-L, L]^d`` with the origin removed.  The same object drives the spatial
displacement of branching random walk, the bond structure of oriented
percolation, and the infection attempts of the contact process, so all
spatial models share one notion of "one step".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

_FAMILY_UNIFORM = "uniform_box"


@dataclass(frozen=True)
class SpreadOutKernel:
    """Finite-range symmetric step distribution.

    Attributes
    ----------
    d, L:
        Dimension and range; the support is contained in ``[-L, L]^d``.
    offsets:
        ``(S, d)`` int64 array of support points in lexicographic order.
    probs:
        Matching probabilities, summing to one.
    family:
        Tag recording how the kernel was built; ``"uniform_box"`` kernels
        get O(1) index-to-point sampling.
    """

    d: int
    L: int
    offsets: np.ndarray = field(repr=False)
    probs: np.ndarray = field(repr=False)
    family: str = _FAMILY_UNIFORM

    def __post_init__(self) -> None:
        offsets = np.asarray(self.offsets, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "probs", probs)
        if self.d < 1 or self.L < 1:
            raise ValueError("kernel needs d >= 1 and L >= 1")
        if offsets.ndim != 2 or offsets.shape[1] != self.d:
            raise ValueError("offsets must have shape (S, d)")
        if probs.shape != (offsets.shape[0],):
            raise ValueError("probs must align with offsets")
        if offsets.shape[0] == 0:
            raise ValueError("kernel support is empty")
        if np.any(np.abs(offsets) > self.L):
            raise ValueError("support escapes the box [-L, L]^d")
        if np.any(np.all(offsets == 0, axis=1)):
            raise ValueError("kernel must not put mass at the origin")
        if np.any(probs <= 0):
            raise ValueError("support points must carry positive mass")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("kernel mass must sum to 1")
        # Symmetry D(x) = D(-x): find each negated offset and compare mass.
        order = np.lexsort(offsets.T[::-1])
        if not np.array_equal(offsets[order], offsets):
            raise ValueError("offsets must be sorted lexicographically")
        neg = -offsets
        pos = _lex_search(offsets, neg)
        if np.any(pos < 0) or not np.allclose(probs[pos], probs, rtol=0, atol=1e-15):
            raise ValueError("kernel must be symmetric under x -> -x")

    @property
    def support_size(self) -> int:
        return int(self.offsets.shape[0])

    @cached_property
    def mass(self) -> dict[tuple[int, ...], float]:
        """Support as a point -> probability mapping."""
        return {tuple(int(c) for c in x): float(p) for x, p in zip(self.offsets, self.probs)}

    @cached_property
    def _cumprobs(self) -> np.ndarray:
        cp = np.cumsum(self.probs)
        cp[-1] = 1.0
        return cp

    def to_json(self) -> dict:
        out = {"d": self.d, "L": self.L, "family": self.family}
        if self.family != _FAMILY_UNIFORM:
            out["mass"] = {",".join(map(str, k)): v for k, v in self.mass.items()}
        return out

    @staticmethod
    def from_json(obj: dict) -> "SpreadOutKernel":
        family = obj.get("family", _FAMILY_UNIFORM)
        if family == _FAMILY_UNIFORM:
            return build_uniform_kernel(int(obj["d"]), int(obj["L"]))
        mass = {
            tuple(int(c) for c in key.split(",")): float(p)
            for key, p in obj["mass"].items()
        }
        return kernel_from_mass(int(obj["d"]), int(obj["L"]), mass, family=family)


def _lex_search(sorted_offsets: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Indices of ``queries`` rows inside lexicographically sorted rows (-1 if absent)."""
    d = sorted_offsets.shape[1]
    span = int(sorted_offsets.max() - sorted_offsets.min() + 1) if sorted_offsets.size else 1
    base = np.int64(span)
    shift = sorted_offsets.min()
    keys = np.zeros(sorted_offsets.shape[0], dtype=np.int64)
    qkeys = np.zeros(queries.shape[0], dtype=np.int64)
    for j in range(d):
        keys = keys * base + (sorted_offsets[:, j] - shift)
        qkeys = qkeys * base + (queries[:, j] - shift)
    pos = np.searchsorted(keys, qkeys)
    pos_clamped = np.minimum(pos, keys.size - 1)
    found = keys[pos_clamped] == qkeys
    return np.where(found, pos_clamped, -1)


def build_uniform_kernel(d: int, L: int) -> SpreadOutKernel:
    """Uniform kernel on the punctured box ``[-L, L]^d \\ {0}``.

    Support size is ``(2L+1)^d - 1``; every point carries equal mass.
    """
    if d < 1 or L < 1:
        raise ValueError("build_uniform_kernel needs d >= 1 and L >= 1")
    side = 2 * L + 1
    axes = [np.arange(-L, L + 1, dtype=np.int64)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    origin = (side ** d - 1) // 2
    offsets = np.delete(grid, origin, axis=0)
    s = offsets.shape[0]
    probs = np.full(s, 1.0 / s)
    return SpreadOutKernel(d=d, L=L, offsets=offsets, probs=probs)


def kernel_from_mass(
    d: int, L: int, mass: dict[tuple[int, ...], float], family: str = "custom"
) -> SpreadOutKernel:
    """Build a kernel from an explicit point -> probability mapping."""
    pts = sorted(mass.keys())
    offsets = np.array(pts, dtype=np.int64).reshape(len(pts), d)
    probs = np.array([mass[p] for p in pts], dtype=np.float64)
    return SpreadOutKernel(d=d, L=L, offsets=offsets, probs=probs, family=family)


def kernel_variance(kernel: SpreadOutKernel) -> float:
    """Total step variance ``sum_x |x|^2 D(x)``.

    This is the trace of the step covariance; by symmetry each coordinate
    contributes ``variance / d``.
    """
    sq = np.einsum("ij,ij->i", kernel.offsets.astype(np.float64), kernel.offsets.astype(np.float64))
    return float(sq @ kernel.probs)


def kernel_fourier(kernel: SpreadOutKernel, theta: np.ndarray) -> float:
    """Characteristic function ``sum_x D(x) cos(theta . x)`` (real by symmetry)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (kernel.d,):
        raise ValueError(f"wavevector must have shape ({kernel.d},)")
    phases = kernel.offsets.astype(np.float64) @ theta
    return float(np.cos(phases) @ kernel.probs)


def sample_step_indices(
    kernel: SpreadOutKernel, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Indices into ``kernel.offsets`` for ``size`` independent steps.

    Uniform-box kernels draw one integer per step; because the origin is
    already deleted from ``offsets``, the raw integer is the decoded index.
    Other families fall back to inverse-CDF lookup.
    """
    if kernel.family == _FAMILY_UNIFORM:
        return rng.integers(0, kernel.support_size, size=size)
    u = rng.random(size)
    return np.searchsorted(kernel._cumprobs, u, side="right")


def sample_step(
    kernel: SpreadOutKernel, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """One step (shape ``(d,)``) or ``size`` steps (shape ``(size, d)``)."""
    if size is None:
        return kernel.offsets[sample_step_indices(kernel, rng, 1)[0]].copy()
    return kernel.offsets[sample_step_indices(kernel, rng, size)]


def sample_forward_children(
    kernel: SpreadOutKernel, p: float, rng: np.random.Generator
) -> np.ndarray:
    """Occupied forward offsets for one oriented-percolation site.

    Each support point ``y`` is opened independently with probability
    ``p * D(y)``; the result is the (distinct) set of opened offsets as an
    ``(m, d)`` array.  Requires ``p * max(D) <= 1``.
    """
    pmax = p * float(kernel.probs.max())
    if p < 0 or pmax > 1.0 + 1e-12:
        raise ValueError("bond intensity p * D(y) must lie in [0, 1]")
    u = rng.random(kernel.support_size)
    return kernel.offsets[u < p * kernel.probs]
