"""Command-line front end: config parsing, run orchestration, artifacts.

Subcommands:
    run       adaptive solve; writes history.csv, mesh.txt, orbitals.txt
    verify    adaptive solve checked against a dense-quality reference
              eigensolver on every level; writes verify.csv
    spectrum  print the closed-form unit-square eigenvalues

Config files are flat key=value text, one key per line, "#" comments.
"""

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import mesh as mesh_mod
from .adapt import AdaptConfig, AdaptError, adaptive_solve, records_to_csv
from .assembly import AssemblyError, Coefficients
from .estimator import EstimatorError, estimate
from .linalg import LinAlgError
from .mesh import MeshError
from .paro import ParoError, ParoTolerances, initial_block
from .verify import (VerifyError, analytic_spectrum, dist_a,
                     quasi_orthogonality_report, reference_eig)

__all__ = ["CliError", "RunConfig", "parse_config", "serialize_config",
           "build_coefficients", "cmd_run", "cmd_verify", "cmd_spectrum",
           "main"]


class CliError(ValueError):
    """Configuration or orchestration failure reported to the user."""


@dataclass(frozen=True)
class RunConfig:
    """Flat run description parsed from a key=value file.

    Zero means "automatic" for minres_max_iter and threads and "off"
    for budget_factor; everything else maps directly onto AdaptConfig
    and ParoTolerances, which validate the numeric ranges.
    """
    domain: str = "unit_square"
    coefficients: str = "identity"
    diffusion: float = 1.0
    reaction: float = 0.0
    n_orbitals: int = 1
    theta: float = 0.5
    ell: int = 1
    tol1: float = 1e-6
    tol2: float = 1e-8
    rel_gap: float = 0.02
    max_refinements: int = 12
    max_inner: int = 50
    minres_tol: float = 1e-10
    minres_max_iter: int = 0
    marking: str = "dorfler"
    budget_factor: float = 0.0
    initial_passes: int = 4
    seed: int = 0
    threads: int = 0
    out_dir: str = "."


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text):
    """Parse flat key=value text into a RunConfig.

    Raises CliError with a line-numbered diagnostic for anything
    malformed: missing "=", unknown or duplicate keys, bad numbers.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"line {lineno}: expected key=value, got "
                           f"{line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise CliError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise CliError(f"line {lineno}: duplicate key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            values[key] = kind(value) if kind is not str else value
        except ValueError:
            raise CliError(f"line {lineno}: expected {kind.__name__} for "
                           f"{key}, got {value!r}") from None
    return RunConfig(**values)


def serialize_config(config):
    """Canonical key=value rendering; floats as shortest round-trip."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        text = repr(float(value)) if f.type is float else str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines) + "\n"


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text)


def _variable_case():
    def diffusion(x, y):
        return (2.0 + np.sin(np.pi * x) * np.sin(np.pi * y)) * np.eye(2)

    return Coefficients(diffusion, lambda x, y: x * x + y * y)


_NAMED_CASES = {
    "anisotropic": lambda: Coefficients.constant(np.diag([4.0, 1.0])),
    "variable": _variable_case,
}


def build_coefficients(config):
    name = config.coefficients
    if name == "identity":
        return Coefficients.identity()
    if name == "constant":
        return Coefficients.constant(config.diffusion * np.eye(2),
                                     config.reaction)
    if name in _NAMED_CASES:
        return _NAMED_CASES[name]()
    known = ", ".join(["identity", "constant"] + sorted(_NAMED_CASES))
    raise CliError(f"unknown coefficient case {name!r}; choose one of "
                   f"{known}")


def build_adapt_config(config):
    tols = ParoTolerances(
        tol2=config.tol2, max_inner=config.max_inner,
        minres_tol=config.minres_tol,
        minres_max_iter=config.minres_max_iter or None,
        rel_gap=config.rel_gap)
    return AdaptConfig(
        theta=config.theta, ell=config.ell, tol1=config.tol1,
        max_refinements=config.max_refinements, paro_tols=tols,
        rel_gap=config.rel_gap, marking=config.marking,
        budget_factor=config.budget_factor or None,
        initial_passes=config.initial_passes)


def _apply_overrides(config, out_dir, threads):
    if out_dir is not None:
        config = replace(config, out_dir=out_dir)
    if threads is not None:
        config = replace(config, threads=threads)
    return config


def write_orbitals(path, block):
    """Vector dump: first line n_dofs, then each orbital's values, one
    per line, orbitals in flat cluster order."""
    lines = [str(block.vectors.shape[1])]
    for row in block.vectors:
        lines.extend(repr(float(v)) for v in row)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _summary_line(records, block):
    head = f"{records[-1].n},{records[-1].n_dofs}"
    tail = ",".join(repr(float(v)) for v in block.ritz_values)
    return f"{head},{tail}"


def cmd_run(config_path, out_dir=None, threads=None):
    """Adaptive solve from a config file; exit 0 on convergence, 2 when
    max_refinements ran out first."""
    config = _apply_overrides(load_config(config_path), out_dir, threads)
    coeffs = build_coefficients(config)
    records, block, final_mesh = adaptive_solve(
        config.domain, coeffs, config.n_orbitals,
        build_adapt_config(config), seed=config.seed,
        threads=config.threads or None)
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "history.csv"), "w",
              encoding="ascii") as fh:
        fh.write(records_to_csv(records))
    mesh_mod.dump(final_mesh, os.path.join(config.out_dir, "mesh.txt"))
    write_orbitals(os.path.join(config.out_dir, "orbitals.txt"), block)
    print(_summary_line(records, block))
    return 0 if records[-1].delta1 <= config.tol1 else 2


_RITZ_MATCH_TOL = 1e-8
_CLUSTER_DIST_TOL = 1e-6
_ETA_RATIO_TOL = 1e-4


def cmd_verify(config_path, out_dir=None, threads=None):
    """Adaptive solve with a per-level reference eigensolver check.

    Emits verify.csv (per level: cluster distances, per-pair value gaps,
    estimator ratio) and prints one PASS/FAIL line per final-level
    check; exit 0 only if every check passes.
    """
    config = _apply_overrides(load_config(config_path), out_dir, threads)
    coeffs = build_coefficients(config)
    rows = []
    last = {}

    def observer(level, current, system, block, indicators):
        ref = reference_eig(system, config.n_orbitals)
        slices = block.layout.cluster_slices()
        if rows and len(slices) != len(rows[0]) - 3 - config.n_orbitals:
            raise CliError("cluster count changed between levels; lower "
                           "rel_gap or refine the initial mesh")
        dists = [dist_a(system, block.vectors[s], ref.vectors[s])
                 for s in slices]
        gaps = list(block.ritz_values - ref.eigenvalues)
        ref_block = initial_block(system, ref.vectors, config.rel_gap)
        eta_ref_sq = estimate(current, coeffs, ref_block).global_sq
        ratio = float(np.sqrt(indicators.global_sq / eta_ref_sq))
        rows.append([level, system.n_dofs, *dists, *gaps, ratio])
        last.update(system=system, block=block, ref=ref, dists=dists,
                    ratio=ratio)

    records, block, _ = adaptive_solve(
        config.domain, coeffs, config.n_orbitals,
        build_adapt_config(config), seed=config.seed,
        threads=config.threads or None, observer=observer)

    q = len(last["dists"])
    header = (["n", "n_dofs"] + [f"dist_a_{i}" for i in range(q)]
              + [f"gap_{j}" for j in range(config.n_orbitals)]
              + ["eta_ratio"])
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join([str(row[0]), str(row[1])]
                              + [repr(float(v)) for v in row[2:]]))
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "verify.csv"), "w",
              encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")

    ref = last["ref"]
    rel = float(np.max(np.abs(last["block"].ritz_values - ref.eigenvalues)
                       / np.abs(ref.eigenvalues)))
    reports = quasi_orthogonality_report(last["system"], last["block"],
                                         ref, last["block"].layout)
    checks = [
        ("ritz_match", rel <= _RITZ_MATCH_TOL, rel),
        ("cluster_distance", max(last["dists"]) <= _CLUSTER_DIST_TOL,
         max(last["dists"])),
        ("quasi_orthogonality", all(r.bound_ok for r in reports),
         max(max(r.per_vector) for r in reports)),
        ("estimator_ratio", abs(last["ratio"] - 1.0) <= _ETA_RATIO_TOL,
         last["ratio"]),
    ]
    for name, ok, value in checks:
        print(f"{name} {'PASS' if ok else 'FAIL'} {float(value)!r}")
    return 0 if all(ok for _, ok, _ in checks) else 1


def cmd_spectrum(count):
    for value in analytic_spectrum("unit_square", count):
        print(repr(float(value)))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="paroeig",
        description="Adaptive eigensolver for clustered elliptic "
                    "eigenproblems with parallel orbital updates.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="flat key=value run description")
        p.add_argument("--out", default=None,
                       help="output directory (overrides out_dir)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap, 0 = one per orbital")
    p = sub.add_parser("spectrum")
    p.add_argument("--count", type=int, default=6,
                   help="how many unit-square eigenvalues to print")
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.threads)
        if args.command == "verify":
            return cmd_verify(args.config, args.out, args.threads)
        return cmd_spectrum(args.count)
    except (CliError, AdaptError, AssemblyError, EstimatorError,
            LinAlgError, MeshError, ParoError, VerifyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
