"""Parallel orbital-updating iteration for clustered eigenvalue problems.

One inner sweep on a fixed mesh does, in order:
  1. group the current Ritz values into clusters (relative-gap rule),
  2. pick one shift per cluster (arithmetic mean of the cluster),
  3. for every orbital u solve (K - shift*M) x = shift*M u, all N solves
     independent and run concurrently,
  4. Rayleigh-Ritz on the span of the half-steps, giving a b-orthonormal
     block with ascending Ritz values,
  5. stop when the relative eigenvalue movement delta2 drops below tol2.

The shifted systems are intentionally near-singular: the closer a shift
sits to an eigenvalue, the harder the solve amplifies the wanted
eigendirections. Half-steps are therefore huge and unnormalized; the
Ritz step renormalizes. A solver hitting its iteration cap is routine,
not an error.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .linalg import (
    LinAlgError,
    ShiftedOperator,
    b_orthonormalize,
    dense_sym_gen_eig,
    gram,
    minres_solve,
)

DEFAULT_REL_GAP = 0.02


class ParoError(RuntimeError):
    """Degenerate orbital data or a failed Ritz reduction."""


@dataclass(frozen=True)
class ClusterLayout:
    """Partition of N ascending values into q contiguous clusters."""
    q: int
    d: tuple

    def __post_init__(self):
        if self.q != len(self.d) or self.q < 1:
            raise ParoError("cluster count must match multiplicity list")
        if any(int(di) < 1 for di in self.d):
            raise ParoError("every cluster multiplicity must be >= 1")
        object.__setattr__(self, "d", tuple(int(di) for di in self.d))

    @property
    def n(self):
        return sum(self.d)

    def starts(self):
        return np.concatenate([[0], np.cumsum(self.d)])

    def cluster_slices(self):
        s = self.starts()
        return [slice(int(s[i]), int(s[i + 1])) for i in range(self.q)]

    def flat_to_pair(self, flat):
        """Flat index -> (cluster i, within-cluster j), both 0-based."""
        s = self.starts()
        if not 0 <= flat < self.n:
            raise ParoError(f"flat index {flat} out of range")
        i = int(np.searchsorted(s, flat, side="right") - 1)
        return i, int(flat - s[i])

    def pair_to_flat(self, i, j):
        if not (0 <= i < self.q and 0 <= j < self.d[i]):
            raise ParoError(f"pair ({i}, {j}) out of range")
        return int(self.starts()[i] + j)


@dataclass(frozen=True)
class OrbitalBlock:
    """A block of N orbitals with their Ritz values and cluster shifts.

    vectors is (N, n_dofs) in flat cluster order; after a Ritz step the
    rows are b-orthonormal and ritz_values ascend.
    """
    layout: ClusterLayout
    vectors: np.ndarray
    ritz_values: np.ndarray
    shifts: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        ritz = np.asarray(self.ritz_values, dtype=np.float64)
        shifts = np.asarray(self.shifts, dtype=np.float64)
        n = self.layout.n
        if vectors.ndim != 2 or vectors.shape[0] != n:
            raise ParoError(f"expected {n} orbital vectors")
        if ritz.shape != (n,):
            raise ParoError(f"expected {n} ritz values")
        if shifts.shape != (self.layout.q,):
            raise ParoError(f"expected {self.layout.q} shifts")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ritz_values", ritz)
        object.__setattr__(self, "shifts", shifts)

    @property
    def n(self):
        return self.layout.n


@dataclass(frozen=True)
class ParoTolerances:
    """Stopping data for the inner loop; every field must be positive."""
    tol2: float = 1e-8
    max_inner: int = 50
    minres_tol: float = 1e-10
    minres_max_iter: int | None = None
    rel_gap: float = DEFAULT_REL_GAP

    def __post_init__(self):
        if (self.tol2 <= 0 or self.max_inner < 1 or self.minres_tol <= 0
                or (self.minres_max_iter is not None
                    and self.minres_max_iter < 1)
                or self.rel_gap <= 0):
            raise ParoError("tolerances must be positive")


def cluster_guesses(values, rel_gap=DEFAULT_REL_GAP):
    """Group ascending eigenvalue guesses into relative-gap clusters.

    A new cluster starts at k iff
        values[k] - values[k-1] > rel_gap * max(1, |values[k-1]|).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ParoError("need at least one eigenvalue guess")
    if rel_gap <= 0:
        raise ParoError("rel_gap must be positive")
    if np.any(np.diff(v) < 0):
        raise ParoError("eigenvalue guesses must be ascending")
    d = []
    count = 1
    for k in range(1, v.size):
        if v[k] - v[k - 1] > rel_gap * max(1.0, abs(v[k - 1])):
            d.append(count)
            count = 1
        else:
            count += 1
    d.append(count)
    return ClusterLayout(q=len(d), d=tuple(d))


def _mean_shifts(values, layout):
    return np.array([values[s].mean() for s in layout.cluster_slices()])


def compute_shifts(block):
    """One shift per cluster: the arithmetic mean of its Ritz values."""
    return _mean_shifts(block.ritz_values, block.layout)


def _safe_shift(shift, ritz_values):
    """Nudge a shift that collides with a Ritz value to machine distance;
    an exactly singular operator would make MINRES directionless."""
    if np.min(np.abs(shift - ritz_values)) < 1e-12 * abs(shift):
        return shift * (1.0 - 1e-10)
    return shift


def orbital_update(sys, block, tols, threads=None):
    """Solve (K - shift_i M) x_ij = shift_i M u_ij for every orbital.

    Returns the (N, n_dofs) array of unnormalized half-step vectors.
    The N solves are independent; they run on a thread pool (the work is
    sparse matvecs, and each solve owns its workspace). Iteration caps
    are expected near convergence and not reported as errors.
    """
    jobs = []
    for i, sl in enumerate(block.layout.cluster_slices()):
        shift = _safe_shift(float(block.shifts[i]), block.ritz_values)
        for flat in range(sl.start, sl.stop):
            rhs = shift * sys.M.matvec(block.vectors[flat])
            if not np.any(rhs):
                raise ParoError(f"orbital {flat} produced a zero "
                                f"right-hand side (degenerate orbital)")
            jobs.append((ShiftedOperator(sys.K, sys.M, shift), rhs))

    def solve(job):
        op, rhs = job
        return minres_solve(op, rhs, tol=tols.minres_tol,
                            max_iter=tols.minres_max_iter).solution

    if threads is not None and threads <= 1:
        results = [solve(job) for job in jobs]
    else:
        workers = threads or min(len(jobs), os.cpu_count() or 1)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, jobs))
    return np.vstack(results)


def ritz_step(sys, half_steps, layout, rel_gap=DEFAULT_REL_GAP):
    """Rayleigh-Ritz on span(half_steps) -> new b-orthonormal block.

    The half-steps are b-orthonormalized first (their raw scales differ
    by many orders of magnitude), then the N x N projected pencil is
    solved densely. Cluster structure is re-derived from the new Ritz
    values, so membership may legitimately shuffle between sweeps.
    """
    hs = np.asarray(half_steps, dtype=np.float64)
    if hs.ndim != 2:
        raise ParoError("half_steps must be a (N, n_dofs) array")
    if layout is not None and hs.shape[0] != layout.n:
        raise ParoError(f"expected {layout.n} half-step vectors, "
                        f"got {hs.shape[0]}")
    try:
        basis = b_orthonormalize(hs, sys.M)
        a_bar = gram(basis, sys.K)
        m_bar = gram(basis, sys.M)
        values, w = dense_sym_gen_eig(a_bar, m_bar)
    except LinAlgError as exc:
        raise ParoError(
            "half-step block is numerically rank deficient; decrease "
            "minres_tol or perturb the initial data") from exc
    vectors = w.T @ basis
    new_layout = cluster_guesses(values, rel_gap)
    return OrbitalBlock(layout=new_layout, vectors=vectors,
                        ritz_values=values,
                        shifts=_mean_shifts(values, new_layout))


def initial_block(sys, vectors, rel_gap=DEFAULT_REL_GAP):
    """Build a valid starting block from raw (possibly skew) vectors."""
    return ritz_step(sys, vectors, None, rel_gap)


def delta2(new_values, old_values):
    """Relative eigenvalue movement: sum|new - old| / sum|old|."""
    new = np.asarray(new_values, dtype=np.float64)
    old = np.asarray(old_values, dtype=np.float64)
    num = np.abs(new - old).sum()
    den = np.abs(old).sum()
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return float(num / den)


def paro_inner_loop(sys, block0, tols, threads=None):
    """Iterate orbital_update + ritz_step until delta2 <= tol2.

    Returns (final block, sweeps used, delta2 history). Hitting
    max_inner is left to the caller to judge; the partial block is
    still a valid Ritz block.
    """
    block = block0
    history = []
    m_used = 0
    for _ in range(tols.max_inner):
        half = orbital_update(sys, block, tols, threads)
        new_block = ritz_step(sys, half, block.layout, tols.rel_gap)
        d2 = delta2(new_block.ritz_values, block.ritz_values)
        history.append(d2)
        block = new_block
        m_used += 1
        if d2 <= tols.tol2:
            break
    return block, m_used, np.asarray(history)


def check_block(sys, block, tol=1e-8):
    """Validate the post-Ritz invariants; raises ParoError on violation.

    Returns the worst Gram deviation from identity (useful in tests).
    """
    g = gram(block.vectors, sys.M)
    dev = float(np.abs(g - np.eye(block.n)).max()) if block.n else 0.0
    if dev > tol:
        raise ParoError(f"block is not b-orthonormal (deviation {dev:.3e})")
    if np.any(np.diff(block.ritz_values) < 0):
        raise ParoError("ritz values are not ascending")
    for i, sl in enumerate(block.layout.cluster_slices()):
        lo = block.ritz_values[sl].min()
        hi = block.ritz_values[sl].max()
        pad = 1e-12 * max(1.0, abs(hi))
        if not (lo - pad <= block.shifts[i] <= hi + pad):
            raise ParoError(f"shift {i} outside its cluster interval")
    return dev
