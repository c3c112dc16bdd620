"""Outer adaptive loop: solve, estimate, mark, refine, transfer.

One refinement level runs the orbital inner iteration on the current
mesh, evaluates the residual indicators, marks a minimal bulk of
elements, bisects them, and carries the orbitals to the finer mesh by
nodal interpolation. The loop stops when the relative eigenvalue
movement between consecutive meshes (delta1) falls under tol1 or the
refinement budget is spent.

The inner iteration does not need to outrun the discretization error.
With budget_factor set, each level stops its sweeps once delta2 falls
under budget_factor * eta_sq / sum|lambda|, where eta_sq is the global
indicator of the incoming block on the current mesh; tol2 still applies
as the tighter fallback.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import mesh as mesh_mod
from .assembly import assemble
from .estimator import estimate
from .linalg import b_orthonormalize, dense_sym_gen_eig, gram, minres_solve
from .paro import (
    DEFAULT_REL_GAP,
    OrbitalBlock,
    ParoTolerances,
    cluster_guesses,
    compute_shifts,
    initial_block,
    paro_inner_loop,
)


class AdaptError(RuntimeError):
    """Adaptive loop misconfiguration or a failed refinement level.

    When a level fails mid-run the exception carries the records of the
    completed levels in the `records` attribute.
    """

    def __init__(self, message, records=()):
        super().__init__(message)
        self.records = list(records)


@dataclass(frozen=True)
class AdaptConfig:
    """Outer-loop knobs; see module docstring for budget_factor."""
    theta: float = 0.5
    ell: int = 1
    tol1: float = 1e-6
    max_refinements: int = 12
    paro_tols: ParoTolerances = field(default_factory=ParoTolerances)
    rel_gap: float = DEFAULT_REL_GAP
    marking: str = "dorfler"
    budget_factor: float | None = None
    initial_passes: int = 4

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise AdaptError(f"theta out of (0,1): {self.theta}")
        if self.ell < 1:
            raise AdaptError("ell must be >= 1")
        if self.tol1 <= 0.0:
            raise AdaptError("tol1 must be positive")
        if self.max_refinements < 0:
            raise AdaptError("max_refinements must be >= 0")
        if self.marking not in ("dorfler", "uniform"):
            raise AdaptError(f"unknown marking strategy {self.marking!r}")
        if self.budget_factor is not None and self.budget_factor <= 0.0:
            raise AdaptError("budget_factor must be positive when set")
        if self.initial_passes < 0:
            raise AdaptError("initial_passes must be >= 0")


@dataclass(frozen=True)
class RunRecord:
    """One refinement level of an adaptive run."""
    n: int
    n_dofs: int
    ritz_values: np.ndarray
    global_estimator_sq: float
    m_used: int
    delta1: float
    wall_time: float

    def __post_init__(self):
        object.__setattr__(self, "ritz_values",
                           np.asarray(self.ritz_values, dtype=np.float64))


def records_to_csv(records, include_wall_time=False):
    """Fixed-column CSV of a record list.

    Columns: n, n_dofs, ritz_0..ritz_{N-1}, global_estimator_sq, m_used,
    delta1, then wall_time only on request (timings break byte-for-byte
    reproducibility).
    """
    if not records:
        raise AdaptError("no records to serialize")
    n_orb = len(records[0].ritz_values)
    head = ["n", "n_dofs"] + [f"ritz_{k}" for k in range(n_orb)]
    head += ["global_estimator_sq", "m_used", "delta1"]
    if include_wall_time:
        head.append("wall_time")
    lines = [",".join(head)]
    for rec in records:
        if len(rec.ritz_values) != n_orb:
            raise AdaptError("records disagree on orbital count")
        row = [str(rec.n), str(rec.n_dofs)]
        row += [repr(float(v)) for v in rec.ritz_values]
        row += [repr(float(rec.global_estimator_sq)), str(rec.m_used),
                repr(float(rec.delta1))]
        if include_wall_time:
            row.append(repr(float(rec.wall_time)))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def dorfler_mark(indicators, theta):
    """Minimal bulk-criterion element set, ascending indices.

    Greedy: sort squared indicators descending (ties to the lower element
    index) and accumulate until the marked mass reaches theta times the
    global square. A zero estimator marks nothing.
    """
    if not 0.0 < theta < 1.0:
        raise AdaptError(f"theta out of (0,1): {theta}")
    per = indicators.per_element
    if indicators.global_sq == 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(per)), -per))
    csum = np.cumsum(per[order])
    target = theta * indicators.global_sq
    count = int(np.searchsorted(csum, target, side="left")) + 1
    count = min(count, len(per))
    return np.sort(order[:count])


def delta1(new_values, old_values):
    """Relative eigenvalue movement between consecutive meshes."""
    new_values = np.asarray(new_values, dtype=np.float64)
    old_values = np.asarray(old_values, dtype=np.float64)
    den = float(np.abs(new_values).sum())
    num = float(np.abs(new_values - old_values).sum())
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


def default_seed_vectors(system, n_orbitals, seed=0, sweeps=4):
    """Low-mode starting guesses from a few unshifted inverse iterations.

    Oversamples with guard vectors so clustered tails are not missed on
    coarse meshes, then keeps the lowest Rayleigh-Ritz combinations.
    Uses only the package's own solver (MINRES on K), so adaptive runs
    stay independent of the scipy-based reference plumbing.
    """
    rng = np.random.default_rng(seed)
    width = min(n_orbitals + 4, system.n_dofs)
    vecs = rng.standard_normal((width, system.n_dofs))
    for _ in range(sweeps):
        vecs = b_orthonormalize(vecs, system.M)
        rhs = system.M.matmat(vecs.T).T
        vecs = np.stack([minres_solve(system.K, r, tol=1e-10).solution
                         for r in rhs])
    vecs = b_orthonormalize(vecs, system.M)
    _, combo = dense_sym_gen_eig(gram(vecs, system.K), np.eye(width))
    return combo.T[:n_orbitals] @ vecs


def transfer_block(coarse_mesh, coarse_sys, fine_mesh, fine_sys,
                   refine_map, block, rel_gap=DEFAULT_REL_GAP):
    """Carry orbitals to a refined mesh: interpolate nodally, restore
    b-orthonormality, keep the Ritz values as the next initial data."""
    full = coarse_sys.expand(block.vectors)
    fine_full = np.stack([
        mesh_mod.interpolate(coarse_mesh, fine_mesh, refine_map, row)
        for row in full])
    vecs = b_orthonormalize(fine_sys.restrict(fine_full), fine_sys.M)
    layout = cluster_guesses(block.ritz_values, rel_gap)
    moved = OrbitalBlock(layout=layout, vectors=vecs,
                         ritz_values=block.ritz_values,
                         shifts=np.zeros(layout.q))
    return replace(moved, shifts=compute_shifts(moved))


def _effective_tols(config, mesh, coeffs, block):
    """Inner stop matched to the incoming block's estimator level."""
    tols = config.paro_tols
    if config.budget_factor is None:
        return tols
    eta_sq = estimate(mesh, coeffs, block).global_sq
    lam_sum = float(np.abs(block.ritz_values).sum())
    if lam_sum == 0.0:
        return tols
    floor = config.budget_factor * eta_sq / lam_sum
    return replace(tols, tol2=max(tols.tol2, floor))


def adaptive_solve(domain, coeffs, n_orbitals, config,
                   seed_vectors=None, seed=0, threads=None, observer=None):
    """Run the adaptive eigensolver.

    Args:
        domain: initial-mesh name ("unit_square", "l_shape") or a Mesh;
            names are uniformly refined config.initial_passes times first.
        coeffs: Coefficients for the operator pencil.
        n_orbitals: number of wanted eigenpairs N.
        config: AdaptConfig.
        seed_vectors: optional callable (mesh, system) -> (N, n_free)
            starting guesses on the initial mesh; defaults to a few
            inverse-iteration sweeps from an rng(seed) start.
        seed: rng seed for the default start.
        threads: worker cap for the concurrent orbital solves
            (None = one per orbital).
        observer: optional callable (level, mesh, system, block,
            indicators) invoked once per level, after the inner loop.

    Returns:
        (records, final_block, final_mesh); one RunRecord per level.
    """
    if n_orbitals < 1:
        raise AdaptError("need at least one orbital")
    if isinstance(domain, str):
        current, _ = mesh_mod.uniform_refine(
            mesh_mod.build_initial_mesh(domain), config.initial_passes)
    else:
        current = domain
    records = []
    block = None
    prev_values = None
    for level in range(config.max_refinements + 1):
        try:
            system = assemble(current, coeffs)
            if system.n_dofs < n_orbitals:
                raise AdaptError(
                    f"mesh has {system.n_dofs} free dofs for "
                    f"{n_orbitals} orbitals; refine the initial mesh",
                    records=records)
            t0 = time.perf_counter()
            if block is None:
                starts = (seed_vectors(current, system) if seed_vectors
                          else default_seed_vectors(system, n_orbitals,
                                                    seed=seed))
                block = initial_block(system, starts, config.rel_gap)
            tols = _effective_tols(config, current, coeffs, block)
            block, m_used, _ = paro_inner_loop(system, block, tols,
                                               threads)
            indicators = estimate(current, coeffs, block)
            wall = time.perf_counter() - t0
            if observer is not None:
                observer(level, current, system, block, indicators)
            d1 = (np.inf if prev_values is None
                  else delta1(block.ritz_values, prev_values))
            records.append(RunRecord(
                n=level, n_dofs=system.n_dofs,
                ritz_values=block.ritz_values.copy(),
                global_estimator_sq=indicators.global_sq,
                m_used=m_used, delta1=d1, wall_time=wall))
            prev_values = block.ritz_values.copy()
            if d1 <= config.tol1 or level == config.max_refinements:
                break
            if config.marking == "uniform":
                marked = np.arange(current.n_triangles)
            else:
                marked = dorfler_mark(indicators, config.theta)
            if marked.size == 0:
                break
            fine, rmap = mesh_mod.refine(current, marked, config.ell)
            fine_sys = assemble(fine, coeffs)
            block = transfer_block(current, system, fine, fine_sys, rmap,
                                   block, config.rel_gap)
            current = fine
        except AdaptError:
            raise
        except Exception as exc:
            raise AdaptError(f"refinement level {level} failed: {exc}",
                             records=records) from exc
    return records, block, current
