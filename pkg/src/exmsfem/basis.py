"""Multiscale velocity and gradient bases on nested grids.

Every basis function lives on one coarse cell K and is attached to one of
K's six faces. It is the fine expanded mixed solution of a Neumann problem on
K (or on an enlarged block S for oversampling) with divergence ``s_j / |K|``
and a prescribed unit normal flux through face j. The velocity part is
``psi`` (fine +axis fluxes on K's subgrid faces); the gradient part is
``eta`` (broken RT0 coefficients on K's fine cells). They satisfy
``psi + k eta = 0``.

Coarse velocity unknowns ("dofs") are shared by the two cells adjacent to
a coarse face. A local basis has one dof per coarse face. A global basis
has one dof per (face, distinct global-field profile).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DegenerateBasis, DegenerateCoefficient, OversampleError
from .fem import (BoundaryCondition, ExpandedSolution, LocalNeumannSolver, SolverConfig,
                  assemble_expanded_fine, check_cell_blocks, pairing_matrix, solve_expanded_fine,
                  weighted_mass)
from .fields import CoefficientField, SourceField
from .grid import LOCAL_FACE_AXIS, LOCAL_FACE_SIGN, CartesianGrid, NestedGridPair, build_nested

log = logging.getLogger(__name__)

VARIANTS = ("local", "oversampled", "global")
FLUX_TOL = 1e-8
DEDUP_TOL = 1e-3


@dataclass
class GlobalFieldSet:
    """Fine velocity fields (``fields[i]`` = +axis fluxes per fine face)."""

    fields: np.ndarray  # (N, n_faces)
    provenance: str  # solution_field | harmonic_coordinates | user
    solutions: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.fields = np.atleast_2d(np.asarray(self.fields, dtype=float))

    @property
    def n_fields(self) -> int:
        return self.fields.shape[0]


@dataclass
class CoarseBasisSet:
    """Fine-grid representation of a coarse multiscale space.

    Per coarse cell K (lists indexed by K):

    * ``cell_dofs[K]``: global coarse dof of each local basis function;
    * ``cell_sides[K]``: local face (0..5) each function is attached to;
    * ``psi[K]``: (m_K, n_sub_faces) fine +axis fluxes on K's subgrid;
    * ``eta[K]``: (m_K, n_sub_cells, 6) broken RT0 gradient coefficients.

    ``dof_face`` / ``dof_field`` give the coarse face and global-field id
    (-1 for the uniform profile) of each dof. For oversampled bases the
    shared dofs realise the map onto coarse RT0 (coefficient of chi_e).
    """

    variant: str
    pair: NestedGridPair
    cell_dofs: list
    cell_sides: list
    psi: list
    eta: list
    dof_face: np.ndarray
    dof_field: np.ndarray
    layers: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_dofs(self) -> int:
        return len(self.dof_face)

    @property
    def conforming(self) -> bool:
        return self.variant != "oversampled"

    def subgrid(self, K):
        return self.pair._subgrids[K]

    def psi_local(self, K) -> np.ndarray:
        """Velocity basis of cell K as per-fine-cell local fluxes, (m_K, n_sub, 6)."""
        return self.psi[K][:, self.subgrid(K).grid.cell_faces]

    def divergence(self, K) -> np.ndarray:
        """Fine-cell integrals of div psi on K, shape (m_K, n_sub)."""
        return (LOCAL_FACE_SIGN * self.psi_local(K)).sum(axis=2)

    def face_fluxes(self, K) -> np.ndarray:
        """Total +axis flux of every basis function of K through K's six faces, (m_K, 6)."""
        g = self.subgrid(K).grid
        out = np.empty((self.psi[K].shape[0], 6))
        for j in range(6):
            out[:, j] = self.psi[K][:, g.boundary_faces(LOCAL_FACE_AXIS[j], j % 2)].sum(axis=1)
        return out

    def save(self, path):
        save_basis(self, path)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _basis_mass(pair: NestedGridPair, k, rule=None) -> np.ndarray:
    if isinstance(k, CoefficientField):
        if k.grid != pair.fine:
            raise ConfigError("coefficient field is not defined on the fine grid")
        M = weighted_mass(k, rule)
    else:
        M = np.asarray(k, dtype=float)
        if M.shape != (pair.fine.n_cells, 6, 6):
            raise ConfigError(f"mass array must have shape ({pair.fine.n_cells}, 6, 6)")
    return M


def _checked_solver(grid, M, K, cfg):
    try:
        check_cell_blocks(M, pairing_matrix(grid))
    except DegenerateCoefficient as exc:
        raise DegenerateCoefficient(f"coarse cell {K}: {exc}", cells=exc.cells) from exc
    return LocalNeumannSolver(grid, M, cfg)


def _side_faces(grid: CartesianGrid):
    return [grid.boundary_faces(LOCAL_FACE_AXIS[j], j % 2) for j in range(6)]


def _uniform_profile(pair, F) -> np.ndarray:
    n = len(pair.fine_faces_of_coarse_face(F))
    return np.full(n, 1.0 / n)


def _solve_cell(pair, K, M, sides, profiles, cfg):
    """Local Neumann solves on coarse cell K for the given (side, profile) list."""
    sub = pair._subgrids[K]
    g = sub.grid
    solver = _checked_solver(g, M[sub.cells], K, cfg)
    side_faces = _side_faces(g)
    m = len(sides)
    G = np.zeros((g.n_faces, m))
    D = np.zeros((g.n_cells, m))
    for r, (j, prof) in enumerate(zip(sides, profiles)):
        G[side_faces[j], r] = prof
        D[:, r] = LOCAL_FACE_SIGN[j] / g.volume
    theta, u, _ = solver.solve(D, G)
    return u.T.copy(), np.moveaxis(theta, 2, 0).copy()


def _profile_on_sub(pair, K, j, F, prof_global_order):
    """Reorder a profile given on the sorted fine faces of coarse face F to K's subgrid order."""
    sub = pair._subgrids[K]
    loc = sub.grid.boundary_faces(LOCAL_FACE_AXIS[j], j % 2)
    glob = pair.fine_faces_of_coarse_face(F)
    idx = np.searchsorted(glob, sub.faces[loc])
    return np.asarray(prof_global_order)[idx]


def _assemble(variant, pair, dof_face, dof_field, dof_profiles, M, cfg, layers=0, meta=None):
    """Local solves for every coarse cell, given per-dof profiles on coarse faces."""
    coarse = pair.coarse
    by_face = {}
    for d, F in enumerate(dof_face):
        by_face.setdefault(int(F), []).append(d)
    cell_dofs, cell_sides, psis, etas = [], [], [], []
    for K in range(coarse.n_cells):
        dofs, sides, profs = [], [], []
        for j, F in enumerate(coarse.cell_faces[K]):
            for d in by_face[int(F)]:
                dofs.append(d)
                sides.append(j)
                profs.append(_profile_on_sub(pair, K, j, int(F), dof_profiles[d]))
        psi, eta = _solve_cell(pair, K, M, sides, profs, cfg)
        cell_dofs.append(np.array(dofs))
        cell_sides.append(np.array(sides))
        psis.append(psi)
        etas.append(eta)
    return CoarseBasisSet(variant, pair, cell_dofs, cell_sides, psis, etas,
                          np.asarray(dof_face), np.asarray(dof_field), layers, meta or {})


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------
def build_local_basis(pair: NestedGridPair, k, rule: Optional[str] = None,
                      cfg: Optional[SolverConfig] = None) -> CoarseBasisSet:
    """One basis per coarse face with uniformly distributed unit flux."""
    M = _basis_mass(pair, k, rule)
    nF = pair.coarse.n_faces
    profiles = [_uniform_profile(pair, F) for F in range(nF)]
    return _assemble("local", pair, np.arange(nF), np.full(nF, -1), profiles, M, cfg)


def _macro_fluxes(pair, K, lo, hi):
    """Flux of each macro-cell RT0 function of S through each face of K, (6, 6)."""
    fine = pair.fine
    klo, khi = pair.fine_box(K)
    Phi = np.zeros((6, 6))
    for a in range(3):
        s0 = fine.lower[a] + lo[a] * fine.h[a]
        s1 = fine.lower[a] + hi[a] * fine.h[a]
        L = s1 - s0
        ratio = 1.0
        for b in range(3):
            if b != a:
                ratio *= (khi[b] - klo[b]) / (hi[b] - lo[b])
        for side_K, ik in ((0, klo[a]), (1, khi[a])):
            x = fine.lower[a] + ik * fine.h[a]
            Phi[2 * a, 2 * a + side_K] = (s1 - x) / L * ratio
            Phi[2 * a + 1, 2 * a + side_K] = (x - s0) / L * ratio
    return Phi


def build_oversampled_basis(pair: NestedGridPair, k, layers: int = 1, rule: Optional[str] = None,
                            cfg: Optional[SolverConfig] = None) -> CoarseBasisSet:
    """Bases from Neumann problems on enlarged blocks, restricted to K and recombined.

    On the block S the six macro-RT0 data sets (unit uniform flux through a
    macro face, divergence s_l/|S|) are solved; the restrictions to K are
    combined with coefficients c = Phi^-1, where Phi[l, j] is the flux of the
    l-th macro RT0 function through face j of K, so that the combination
    carries the face data of the coarse RT0 function chi_j.
    """
    if int(layers) < 1:
        raise ValueError(f"oversampling needs layers >= 1, got {layers}")
    M = _basis_mass(pair, k, rule)
    coarse = pair.coarse
    fine = pair.fine
    cell_dofs, cell_sides, psis, etas = [], [], [], []
    whole = 0
    for K in range(coarse.n_cells):
        reg = pair.oversample_region(K, layers)
        if reg.lo == (0, 0, 0) and reg.hi == tuple(fine.counts):
            whole += 1
        S = fine.box(reg.lo, reg.hi)
        solver = _checked_solver(S.grid, M[S.cells], K, cfg)
        side_faces = _side_faces(S.grid)
        G = np.zeros((S.grid.n_faces, 6))
        D = np.zeros((S.grid.n_cells, 6))
        for l in range(6):
            a = LOCAL_FACE_AXIS[l]
            G[side_faces[l], l] = 1.0 / len(side_faces[l])
            D[:, l] = LOCAL_FACE_SIGN[l] / S.grid.volume
        theta, u, _ = solver.solve(D, G)
        klo, khi = pair.fine_box(K)
        inner = S.grid.box(tuple(klo[a] - reg.lo[a] for a in range(3)),
                           tuple(khi[a] - reg.lo[a] for a in range(3)))
        Phi = _macro_fluxes(pair, K, reg.lo, reg.hi)
        if np.linalg.cond(Phi) > 1e12:
            raise OversampleError(f"singular oversampling coefficients on coarse cell {K}", cell=K)
        c = np.linalg.inv(Phi)  # c @ Phi = I
        psi = c @ u[inner.faces].T
        eta = np.einsum("jl,cil->jci", c, theta[inner.cells])
        cell_dofs.append(coarse.cell_faces[K].copy())
        cell_sides.append(np.arange(6))
        psis.append(psi)
        etas.append(eta)
    if whole:
        warnings.warn(f"oversampling block covers the whole domain for {whole} coarse cell(s)")
    nF = coarse.n_faces
    return CoarseBasisSet("oversampled", pair, cell_dofs, cell_sides, psis, etas,
                          np.arange(nF), np.full(nF, -1), int(layers), {"whole_domain_cells": whole})


def face_profiles(pair: NestedGridPair, global_fields: GlobalFieldSet, tau: float = FLUX_TOL,
                  dedup_tol: float = DEDUP_TOL):
    """Normalised flux profiles per coarse face: (dof_face, dof_field, profiles, n_fallback).

    Each field's fine fluxes on a face are scaled to total flux 1. A field
    whose face flux is below ``tau`` times its largest absolute coarse-face
    flux falls back to the uniform profile. Profiles that are (numerically)
    linear combinations of ones already kept on the same face are dropped.
    """
    U = global_fields.fields
    nF = pair.coarse.n_faces
    faces = [pair.fine_faces_of_coarse_face(F) for F in range(nF)]
    scale = np.zeros(len(U))
    for F in range(nF):
        scale = np.maximum(scale, np.abs(U[:, faces[F]]).sum(axis=1))
    dof_face, dof_field, profiles = [], [], []
    fallback = 0
    for F in range(nF):
        kept = []
        for i in range(len(U)):
            g = U[i, faces[F]]
            tot = g.sum()
            if scale[i] == 0 or abs(tot) < tau * scale[i]:
                prof, fid = np.full(len(g), 1.0 / len(g)), -1
                fallback += 1
            else:
                prof, fid = g / tot, i
            if kept:
                Q = np.linalg.qr(np.array([p for p, _ in kept]).T)[0]
                resid = prof - Q @ (Q.T @ prof)
                if np.linalg.norm(resid) <= dedup_tol * np.linalg.norm(prof):
                    continue
            kept.append((prof, fid))
        for prof, fid in kept:
            dof_face.append(F)
            dof_field.append(fid)
            profiles.append(prof)
    return np.array(dof_face), np.array(dof_field), profiles, fallback


def build_global_basis(pair: NestedGridPair, k, global_fields: GlobalFieldSet, rule: Optional[str] = None,
                       tau: float = FLUX_TOL, cfg: Optional[SolverConfig] = None) -> CoarseBasisSet:
    """Bases whose face data are the normalised traces of global velocity fields."""
    if global_fields.fields.shape[1] != pair.fine.n_faces:
        raise ConfigError("global fields are not defined on the fine grid")
    M = _basis_mass(pair, k, rule)
    dof_face, dof_field, profiles, fallback = face_profiles(pair, global_fields, tau)
    n_checks = pair.coarse.n_faces * global_fields.n_fields
    if fallback == n_checks:
        warnings.warn("global fields carry no flux on any coarse face; basis degenerates to local")
    meta = {"n_fields": global_fields.n_fields, "provenance": global_fields.provenance,
            "fallback_faces": int(fallback)}
    return _assemble("global", pair, dof_face, dof_field, profiles, M, cfg, meta=meta)


def build_basis(variant: str, pair: NestedGridPair, k, global_fields: Optional[GlobalFieldSet] = None,
                layers: int = 1, rule: Optional[str] = None, cfg: Optional[SolverConfig] = None):
    if variant == "local":
        return build_local_basis(pair, k, rule, cfg)
    if variant in ("oversampled", "os"):
        return build_oversampled_basis(pair, k, layers, rule, cfg)
    if variant == "global":
        if global_fields is None:
            raise ConfigError("global basis needs global fields")
        return build_global_basis(pair, k, global_fields, rule, cfg=cfg)
    raise ConfigError(f"unknown basis variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# global fields
# ---------------------------------------------------------------------------
def compute_harmonic_global_fields(grid, k: CoefficientField, dims: int = 3, rule: Optional[str] = None,
                                   cfg: Optional[SolverConfig] = None) -> GlobalFieldSet:
    """Velocities of the harmonic-coordinate problems: zero source, p = x_i on the boundary."""
    grid = getattr(grid, "fine", grid)
    sols = []
    for i in range(dims):
        bc = BoundaryCondition.dirichlet(lambda x, i=i: x[:, i])
        sols.append(solve_expanded_fine(assemble_expanded_fine(grid, k, None, bc, rule), cfg))
    return GlobalFieldSet(np.array([s.u for s in sols]), "harmonic_coordinates", sols)


def compute_solution_global_field(grid, k: CoefficientField, f=None, bc: Optional[BoundaryCondition] = None,
                                  rule: Optional[str] = None, cfg: Optional[SolverConfig] = None,
                                  solution: Optional[ExpandedSolution] = None) -> GlobalFieldSet:
    """The fine expanded mixed velocity of one problem, as a single global field."""
    if solution is None:
        grid = getattr(grid, "fine", grid)
        solution = solve_expanded_fine(assemble_expanded_fine(grid, k, f, bc, rule), cfg)
    return GlobalFieldSet(solution.u[None, :], "solution_field", [solution])


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------
FORMAT_VERSION = 1


def save_basis(basis: CoarseBasisSet, path) -> None:
    """Write a basis to a numpy ``.npz`` container.

    The ``header`` entry is a JSON string with the variant, grid shapes,
    domain box, layers and metadata; per coarse cell K the payload holds
    ``dofs_K``, ``sides_K``, ``psi_K`` and ``eta_K``; ``dof_face`` and
    ``dof_field`` describe the coarse dofs.
    """
    pair = basis.pair
    header = {
        "format": "exmsfem-basis", "version": FORMAT_VERSION, "variant": basis.variant,
        "fine": list(pair.fine.counts), "coarse": list(pair.coarse.counts),
        "lower": list(pair.fine.lower), "upper": list(pair.fine.upper),
        "layers": basis.layers, "meta": basis.meta,
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True)),
              "dof_face": basis.dof_face, "dof_field": basis.dof_field}
    for K in range(pair.coarse.n_cells):
        arrays[f"dofs_{K}"] = basis.cell_dofs[K]
        arrays[f"sides_{K}"] = basis.cell_sides[K]
        arrays[f"psi_{K}"] = basis.psi[K]
        arrays[f"eta_{K}"] = basis.eta[K]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_basis(path) -> CoarseBasisSet:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "exmsfem-basis":
            raise ConfigError(f"{path}: not a basis container")
        pair = build_nested(header["fine"], header["coarse"], (header["lower"], header["upper"]))
        n = pair.coarse.n_cells
        return CoarseBasisSet(
            header["variant"], pair,
            [z[f"dofs_{K}"] for K in range(n)], [z[f"sides_{K}"] for K in range(n)],
            [z[f"psi_{K}"] for K in range(n)], [z[f"eta_{K}"] for K in range(n)],
            z["dof_face"], z["dof_field"], header["layers"], header["meta"],
        )
