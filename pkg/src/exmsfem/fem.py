"""Fine-scale expanded mixed finite elements on Cartesian grids.

Unknowns: pressure gradient ``theta`` in broken RT0 (six coefficients per
cell, one per local face), velocity ``u`` in conforming RT0 (one normal flux
per face) and pressure ``p`` in P0. All RT0 functions are oriented along
``+axis`` and normalised to unit flux through their face, so the local
function of face ``j`` has ``int div = s_j`` with ``s = (-1, 1, -1, 1, -1, 1)``.

The solve path hybridises the velocity: each cell keeps its own six fluxes,
continuity is enforced by face multipliers ``lam`` (pressure traces), and
``theta``, ``u`` and ``p`` are eliminated cell by cell. What remains is a
symmetric positive (semi)definite system in ``lam`` only. The assembled
three-field saddle system is kept as an independent check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import CompatibilityError, ConfigError, DegenerateCoefficient, SolverError
from .fields import CoefficientField, SourceField, quadrature_rule
from .grid import LOCAL_FACE_AXIS, LOCAL_FACE_SIGN, CartesianGrid, Subgrid

log = logging.getLogger(__name__)

_PAIR = np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]])


# ---------------------------------------------------------------------------
# element matrices
# ---------------------------------------------------------------------------
def pairing_matrix(grid: CartesianGrid) -> np.ndarray:
    """Unweighted RT0 mass matrix of one cell, N[i, j] = int phi_i . phi_j (6x6)."""
    N = np.zeros((6, 6))
    for a in range(3):
        N[2 * a:2 * a + 2, 2 * a:2 * a + 2] = grid.h[a] / grid.face_area(a) * _PAIR
    return N


def weighted_mass(fld: CoefficientField, rule: Optional[str] = None, cells=None) -> np.ndarray:
    """k-weighted broken RT0 mass matrices, shape (n_cells, 6, 6).

    Cellwise constant fields are integrated exactly (M = k N), as is the
    centre value under ``rule='midpoint'``; otherwise the tensor rule is
    applied to k phi_i . phi_j.
    """
    grid = fld.grid
    cells = np.arange(grid.n_cells) if cells is None else np.asarray(cells)
    aniso = np.asarray(fld.anisotropy, dtype=float)
    N = pairing_matrix(grid)
    M = np.zeros((len(cells), 6, 6))
    rule = rule or fld.default_rule
    if fld.is_cellwise_constant or rule == "midpoint":
        # a one-point product rule would make the RT0 mass singular, so the
        # midpoint rule means: k at the centre times the exact pairing
        kc = fld.cell_values[cells] if fld.is_cellwise_constant else \
            fld.evaluate(cells, np.full((1, 3), 0.5))[:, 0]
        for a in range(3):
            blk = slice(2 * a, 2 * a + 2)
            M[:, blk, blk] = (kc * aniso[a])[:, None, None] * N[None, blk, blk]
        return M
    pts, w = quadrature_rule(rule)
    vals = fld.evaluate(cells, pts)  # (n, nq)
    for a in range(3):
        xi = pts[:, a]
        shp = np.stack([1.0 - xi, xi])  # (2, nq)
        ref = np.einsum("q,iq,jq->qij", w, shp, shp)  # (nq, 2, 2)
        scale = grid.cell_volume / grid.face_area(a) ** 2 * aniso[a]
        blk = slice(2 * a, 2 * a + 2)
        M[:, blk, blk] = scale * np.einsum("cq,qij->cij", vals, ref)
    return M


def check_cell_blocks(M: np.ndarray, N: np.ndarray, cells=None, rtol: float = 1e-13) -> None:
    """Raise DegenerateCoefficient for cells with a singular 2x2 axis block."""
    bad = np.zeros(M.shape[0], dtype=bool)
    for a in range(3):
        blk = M[:, 2 * a:2 * a + 2, 2 * a:2 * a + 2]
        tr = blk[:, 0, 0] + blk[:, 1, 1]
        det = blk[:, 0, 0] * blk[:, 1, 1] - blk[:, 0, 1] * blk[:, 1, 0]
        lam_min = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4 * det, 0.0)))
        ref = np.abs(N[2 * a:2 * a + 2, 2 * a:2 * a + 2]).max()
        bad |= lam_min <= rtol * ref
    if np.any(bad):
        ids = np.flatnonzero(bad) if cells is None else np.asarray(cells)[bad]
        raise DegenerateCoefficient(
            f"k-weighted mass matrix singular on {bad.sum()} cell(s), first {ids[:5].tolist()}",
            cells=ids,
        )


@dataclass(frozen=True)
class LocalMatrices:
    M: np.ndarray  # (6, 6) k-weighted mass
    N: np.ndarray  # (6, 6) pairing
    div: np.ndarray  # (6,) int div phi_i
    lower: np.ndarray  # cell lower corner
    h: np.ndarray


def local_rt0_matrices(cell: int, fld: CoefficientField, rule: Optional[str] = None) -> LocalMatrices:
    grid = fld.grid
    M = weighted_mass(fld, rule, cells=[cell])
    N = pairing_matrix(grid)
    check_cell_blocks(M, N, cells=[cell])
    return LocalMatrices(M[0], N, LOCAL_FACE_SIGN.copy(), grid.cell_lower_corners([cell])[0], grid.h.copy())


# ---------------------------------------------------------------------------
# boundary conditions
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BoundaryCondition:
    """Boundary data on a box.

    ``kind`` is ``no_flow``, ``flux``, ``pressure`` or ``periodic``.
    ``pressure`` is a callable of points (n, 3) evaluated at face centres
    (exact face averages for affine data); ``flux`` holds the +axis oriented
    normal flux for every face of the grid (only boundary entries are read).
    ``sides`` restricts a pressure condition to ((axis, side), ...); the other
    sides are no-flow.
    """

    kind: str = "no_flow"
    pressure: Optional[Callable] = field(default=None, repr=False)
    flux: Optional[np.ndarray] = field(default=None, repr=False)
    sides: Optional[tuple] = None

    @classmethod
    def no_flow(cls):
        return cls("no_flow")

    @classmethod
    def dirichlet(cls, pressure, sides=None):
        return cls("pressure", pressure=pressure, sides=None if sides is None else tuple(sides))

    @classmethod
    def prescribed_flux(cls, flux):
        return cls("flux", flux=np.asarray(flux, dtype=float))

    @classmethod
    def periodic(cls):
        return cls("periodic")


@dataclass
class FaceData:
    """Resolved boundary data for one grid."""

    mult_of_face: np.ndarray  # multiplier index per face
    n_mult: int
    fixed: np.ndarray  # bool per multiplier
    fixed_values: np.ndarray  # per multiplier
    flux_rhs: np.ndarray  # per multiplier: prescribed outward flux (boundary flux faces)
    flux_faces: np.ndarray  # bool per face, velocity prescribed
    flux_values: np.ndarray  # per face, +axis flux where prescribed
    dirichlet_faces: np.ndarray  # bool per face

    @property
    def pure_neumann(self) -> bool:
        return not np.any(self.fixed)


def resolve_boundary(grid: CartesianGrid, bc: BoundaryCondition) -> FaceData:
    nf = grid.n_faces
    bmask = grid.boundary_face_mask
    mult = np.arange(nf)
    fixed = np.zeros(nf, dtype=bool)
    fixed_values = np.zeros(nf)
    flux_faces = np.zeros(nf, dtype=bool)
    flux_values = np.zeros(nf)
    dirichlet = np.zeros(nf, dtype=bool)
    if bc.kind == "no_flow":
        flux_faces[bmask] = True
    elif bc.kind == "flux":
        flux_faces[bmask] = True
        if bc.flux is None or bc.flux.shape != (nf,):
            raise ConfigError(f"flux boundary data must have one entry per face ({nf})")
        flux_values[bmask] = bc.flux[bmask]
    elif bc.kind == "pressure":
        sides = bc.sides or tuple((a, s) for a in range(3) for s in (0, 1))
        for a in range(3):
            for s in (0, 1):
                faces = grid.boundary_faces(a, s)
                if (a, s) in sides:
                    dirichlet[faces] = True
                else:
                    flux_faces[faces] = True
        fixed[dirichlet] = True
        fixed_values[dirichlet] = bc.pressure(grid.face_centers[dirichlet])
    elif bc.kind == "periodic":
        for a in range(3):
            lo, hi = grid.boundary_faces(a, 0), grid.boundary_faces(a, 1)
            mult[hi] = lo
    else:
        raise ConfigError(f"unknown boundary condition {bc.kind!r}")
    # outward flux at boundary faces: x- side is opposite to +axis
    flux_rhs = np.zeros(nf)
    fc = grid.face_cells
    upper_side = fc[:, 1] < 0
    sign = np.where(upper_side, 1.0, -1.0)
    flux_rhs[flux_faces] = (sign * flux_values)[flux_faces]
    if bc.kind == "periodic":
        used, inv = np.unique(mult, return_inverse=True)
        mult = inv
        n_mult = len(used)
        fixed = np.zeros(n_mult, dtype=bool)
        fixed_values = np.zeros(n_mult)
        flux_rhs = np.zeros(n_mult)
    else:
        n_mult = nf
    return FaceData(mult, n_mult, fixed, fixed_values, flux_rhs, flux_faces, flux_values, dirichlet)


# ---------------------------------------------------------------------------
# hybrid condensation engine
# ---------------------------------------------------------------------------
@dataclass
class SolverConfig:
    method: str = "auto"  # auto | direct | cg
    tol: float = 1e-10
    maxiter: int = 5000
    direct_limit: int = 400_000


class CondensedOperator:
    """Cellwise static condensation of a hybridised mixed system.

    On cell K the velocity is ``u_K = Ainv_K (s_K p_K - s_K * lam_K) + z_K``;
    substituting into the divergence and flux-continuity equations and
    eliminating ``p_K`` leaves the multiplier system ``S lam = g``, where S is
    the sum of the cell Schur complements ``D - b b^T / alpha``.
    """

    def __init__(self, Ainv, s, mult, n_mult, fixed, cell_weights, cfg: Optional[SolverConfig] = None,
                 pure_neumann: Optional[bool] = None):
        self.Ainv = np.asarray(Ainv)
        self.s = np.asarray(s, dtype=float)
        self.mult = np.asarray(mult)
        self.n_mult = int(n_mult)
        self.fixed = np.asarray(fixed, dtype=bool)
        self.cell_weights = np.asarray(cell_weights, dtype=float)
        self.cfg = cfg or SolverConfig()
        n, m = self.s.shape
        self.a = np.einsum("cij,cj->ci", self.Ainv, self.s)
        self.alpha = np.einsum("ci,ci->c", self.s, self.a)
        if np.any(self.alpha <= 0):
            bad = np.flatnonzero(self.alpha <= 0)
            raise DegenerateCoefficient(f"non-positive cell Schur pivot on cells {bad[:5].tolist()}", cells=bad)
        # C = diag(s): D = S Ainv S, b = S a
        self.b = self.s * self.a
        self.D = self.s[:, :, None] * self.Ainv * self.s[:, None, :]
        self.S_loc = self.D - self.b[:, :, None] * self.b[:, None, :] / self.alpha[:, None, None]
        # padding slots (s = 0) may sit on fixed dummy multipliers, so callers can say
        # explicitly whether constants are in the kernel
        self.pure_neumann = (not np.any(self.fixed)) if pure_neumann is None else bool(pure_neumann)
        self.precond = None  # optional LinearOperator replacing the AMG cycle in CG
        self._build()

    def _build(self):
        n, m = self.s.shape
        rows = np.repeat(self.mult, m, axis=1).ravel()
        cols = np.tile(self.mult, (1, m)).ravel()
        S = sp.coo_matrix((self.S_loc.ravel(), (rows, cols)), shape=(self.n_mult, self.n_mult)).tocsr()
        S.sum_duplicates()
        free = np.flatnonzero(~self.fixed)
        self.pin = None
        if self.pure_neumann:
            # constant multipliers span the kernel; ground one and shift afterwards
            self.pin = free[0]
            free = free[1:]
        self.free = free
        self.S_full = S
        self.S_ff = S[free][:, free].tocsc()
        self.S_fx = S[free][:, np.flatnonzero(self.fixed)]
        self._factor = None
        self._amg = None

    def factor(self):
        if self._factor is None:
            method = self.cfg.method
            if method == "auto":
                method = "direct" if self.S_ff.shape[0] <= self.cfg.direct_limit else "cg"
            self.method = method
            if method == "direct":
                self._factor = spla.splu(self.S_ff, permc_spec="MMD_AT_PLUS_A",
                                         options={"SymmetricMode": True})
            else:
                self._factor = "cg"
        return self._factor

    def _solve_free(self, rhs, x0=None):
        fac = self.factor()
        if fac != "cg":
            return fac.solve(rhs)
        return self._cg(rhs, x0)

    def _cg(self, rhs, x0=None):
        import pyamg

        if self.precond is not None:
            M = self.precond
        else:
            if self._amg is None:
                self._amg = pyamg.smoothed_aggregation_solver(self.S_ff.tocsr(), symmetry="symmetric")
            M = self._amg.aspreconditioner(cycle="V")
        cols = rhs[:, None] if rhs.ndim == 1 else rhs
        out = np.empty_like(cols)
        for i in range(cols.shape[1]):
            hist = []
            b = cols[:, i]
            if not np.any(b):
                out[:, i] = 0.0
                continue
            x, info = spla.cg(self.S_ff, b, x0=None if x0 is None else (x0 if x0.ndim == 1 else x0[:, i]),
                              rtol=self.cfg.tol, maxiter=self.cfg.maxiter, M=M,
                              callback=lambda xk: hist.append(np.linalg.norm(b - self.S_ff @ xk)))
            if info != 0:
                raise SolverError(f"CG did not converge (info={info})", residuals=hist)
            out[:, i] = x
        return out[:, 0] if rhs.ndim == 1 else out

    def solve(self, F, h=None, z=None, fixed_values=None, x0=None):
        """Solve for one or more right-hand sides.

        F: (n,) or (n, r) cell divergence data; h: (n_mult[, r]) prescribed
        continuity data; z: (n, m[, r]) particular local velocity.
        Returns (p, lam, u_loc).
        """
        F = np.asarray(F, dtype=float)
        batch = F.ndim == 2
        if not batch:
            F = F[:, None]
        r = F.shape[1]
        n, m = self.s.shape
        h = np.zeros((self.n_mult, r)) if h is None else np.asarray(h, dtype=float).reshape(self.n_mult, -1)
        if z is None:
            z = np.zeros((n, m, r))
        else:
            z = np.asarray(z, dtype=float).reshape(n, m, -1)
        lam = np.zeros((self.n_mult, r))
        if fixed_values is not None:
            lam[self.fixed] = np.asarray(fixed_values, dtype=float).reshape(self.n_mult, -1)[self.fixed]
        Fz = F - np.einsum("ci,cir->cr", self.s, z)
        cell_rhs = (self.s[:, :, None] * z) + self.b[:, :, None] * (Fz / self.alpha[:, None])[:, None, :]
        g = -h.copy()
        np.add.at(g, self.mult.ravel(), cell_rhs.reshape(n * m, r))
        if self.pure_neumann:
            tot = g[self.free].sum(axis=0) + g[self.pin]
            if np.any(np.abs(tot) > 1e-9 * np.maximum(np.abs(g).sum(axis=0), 1e-300)):
                raise CompatibilityError(f"pure Neumann data not compatible (net {tot})")
        rhs = g[self.free] - (self.S_fx @ lam[self.fixed] if np.any(self.fixed) else 0.0)
        x0f = None if x0 is None else np.asarray(x0).reshape(self.n_mult, -1)[self.free]
        lam[self.free] = self._solve_free(rhs, x0f).reshape(len(self.free), r)
        # p = F/alpha + sum_i w_i lam_i with sum_i w_i = 1. Work with multipliers
        # relative to one slot per cell so the pressure drops p - lam_j never
        # cancel against the absolute pressure level (keeps div u = F to roundoff).
        lam_loc = lam[self.mult]  # (n, m, r)
        ref = lam_loc[:, 0, :]
        dl = lam_loc - ref[:, None, :]
        rel = Fz / self.alpha[:, None] + np.einsum("ci,cir->cr", self.b / self.alpha[:, None], dl)
        p = ref + rel
        if self.pure_neumann:
            shift = (self.cell_weights @ p) / self.cell_weights.sum()
            p -= shift
            lam -= shift
        u_loc = np.einsum("cij,cjr->cir", self.Ainv,
                          self.s[:, :, None] * (rel[:, None, :] - dl)) + z
        if not batch:
            return p[:, 0], lam[:, 0], u_loc[:, :, 0]
        return p, lam, u_loc

    def scaled(self, cell_scale, cfg: Optional[SolverConfig] = None) -> "CondensedOperator":
        """Same structure with every Ainv_K multiplied by cell_scale[K]."""
        return CondensedOperator(self.Ainv * np.asarray(cell_scale)[:, None, None], self.s, self.mult,
                                 self.n_mult, self.fixed, self.cell_weights, cfg or self.cfg,
                                 self.pure_neumann)

    def as_preconditioner(self) -> spla.LinearOperator:
        """Exact factorisation of this operator, for preconditioning a nearby one."""
        fac = self.factor()
        if fac == "cg":
            raise ConfigError("preconditioner needs a direct factorisation")
        n = self.S_ff.shape[0]
        return spla.LinearOperator((n, n), matvec=fac.solve, dtype=float)


# ---------------------------------------------------------------------------
# fine-scale systems
# ---------------------------------------------------------------------------
@dataclass
class SaddleSystem:
    grid: CartesianGrid
    M: np.ndarray  # (n, 6, 6)
    N: np.ndarray  # (6, 6)
    F: np.ndarray  # (n,) int_K f
    faces: FaceData
    g1: Optional[np.ndarray] = None  # (n, 6) first-equation data (cell problems)
    bc: BoundaryCondition = field(default_factory=BoundaryCondition.no_flow)

    @property
    def n_cells(self):
        return self.grid.n_cells

    @cached_property
    def velocity_dofs(self) -> np.ndarray:
        """Global faces carrying an unknown flux (representative face per periodic pair)."""
        fd = self.faces
        rep = np.zeros(self.grid.n_faces, dtype=bool)
        _, first = np.unique(fd.mult_of_face, return_index=True)
        rep[first] = True
        return np.flatnonzero(rep & ~fd.flux_faces)

    @cached_property
    def _u_map(self):
        """Map every face to its velocity unknown (-1 if prescribed)."""
        fd = self.faces
        dof_of_mult = -np.ones(fd.n_mult, dtype=np.int64)
        dof_of_mult[fd.mult_of_face[self.velocity_dofs]] = np.arange(len(self.velocity_dofs))
        out = dof_of_mult[fd.mult_of_face]
        out[fd.flux_faces] = -1
        return out

    @cached_property
    def blocks(self) -> dict:
        """Sparse blocks A1, B1 (u x theta), B (p x u) and right-hand sides."""
        n = self.n_cells
        cf = self.grid.cell_faces
        umap = self._u_map[cf]  # (n, 6)
        nu = len(self.velocity_dofs)
        cells = np.arange(n)
        r = np.repeat(6 * cells[:, None] + np.arange(6)[None, :], 6, axis=1).ravel()
        c = np.tile(6 * cells[:, None] + np.arange(6)[None, :], (1, 6)).ravel()
        A1 = sp.coo_matrix((self.M.reshape(-1), (r, c)), shape=(6 * n, 6 * n)).tocsr()
        # B1[u, (K, i)] = N[i, j] for face j of K mapped to u
        Nrep = np.broadcast_to(self.N, (n, 6, 6))  # [K, i, j]
        ii = np.repeat(np.arange(6), 6)
        jj = np.tile(np.arange(6), 6)
        rows_u = umap[:, jj].ravel()
        cols_t = (6 * cells[:, None] + ii[None, :]).ravel()
        vals = Nrep[:, ii, jj].ravel()
        keep = rows_u >= 0
        B1 = sp.coo_matrix((vals[keep], (rows_u[keep], cols_t[keep])), shape=(nu, 6 * n)).tocsr()
        sgn = np.broadcast_to(LOCAL_FACE_SIGN, (n, 6)).ravel()
        pu = umap.ravel()
        pk = np.repeat(cells, 6)
        keep = pu >= 0
        B = sp.coo_matrix((sgn[keep], (pk[keep], pu[keep])), shape=(n, nu)).tocsr()
        # prescribed fluxes move to the right-hand side
        fd = self.faces
        u_fixed = np.where(fd.flux_faces, fd.flux_values, 0.0)[cf]  # (n, 6)
        rhs1 = np.zeros((n, 6)) if self.g1 is None else self.g1.copy()
        rhs1 -= np.einsum("ij,cj->ci", self.N, u_fixed)
        rhs3 = self.F - (LOCAL_FACE_SIGN[None, :] * u_fixed).sum(axis=1)
        rhs2 = np.zeros(nu)
        dmask = fd.dirichlet_faces[cf]
        if np.any(dmask):
            pD = fd.fixed_values[fd.mult_of_face[cf]]
            contrib = np.where(dmask, LOCAL_FACE_SIGN[None, :] * pD, 0.0)
            np.add.at(rhs2, umap[dmask], contrib[dmask])
        return {"A1": A1, "B1": B1, "B": B, "rhs1": rhs1.ravel(), "rhs2": rhs2, "rhs3": rhs3}

    def saddle_matrix(self):
        b = self.blocks
        A1, B1, B = b["A1"], b["B1"], b["B"]
        K = sp.bmat([[A1, B1.T, None], [B1, None, B.T], [None, B, None]], format="csr")
        rhs = np.concatenate([b["rhs1"], b["rhs2"], b["rhs3"]])
        return K, rhs

    @cached_property
    def condensed(self) -> "CondensedSystem":
        return hybridize_and_condense(self)


def assemble_expanded_fine(grid_or_pair, k: CoefficientField, f=None, bc: Optional[BoundaryCondition] = None,
                           rule: Optional[str] = None, g1=None) -> SaddleSystem:
    """Assemble the fine three-field system for permeability ``k`` and source ``f``.

    ``f`` may be a SourceField, a per-cell rate array, or None (no source).
    """
    grid = getattr(grid_or_pair, "fine", grid_or_pair)
    if k.grid != grid:
        raise ConfigError("permeability lives on a different grid")
    bc = bc or BoundaryCondition.no_flow()
    M = weighted_mass(k, rule)
    N = pairing_matrix(grid)
    check_cell_blocks(M, N)
    if f is None:
        F = np.zeros(grid.n_cells)
    elif isinstance(f, SourceField):
        F = f.cell_integrals
    else:
        F = np.asarray(f, dtype=float) * grid.cell_volume
    faces = resolve_boundary(grid, bc)
    if faces.pure_neumann:
        net = F.sum() - faces.flux_rhs.sum()
        if abs(net) > 1e-12 * max(np.abs(F).sum() + np.abs(faces.flux_rhs).sum(), 1e-300):
            raise CompatibilityError(f"source and boundary flux do not balance (net {net:.3e})")
    return SaddleSystem(grid, M, N, F, faces, g1=g1, bc=bc)


@dataclass
class CondensedSystem:
    system: SaddleSystem
    operator: CondensedOperator
    Ninv: np.ndarray

    @property
    def matrix(self):
        return self.operator.S_ff

    def recover(self, p, lam, u_loc):
        """Map condensed unknowns back to (theta, u faces)."""
        sys_ = self.system
        sgn = LOCAL_FACE_SIGN
        lam_loc = lam[sys_.faces.mult_of_face[sys_.grid.cell_faces]]
        theta = -np.einsum("ij,cj->ci", self.Ninv, sgn[None, :] * (p[:, None] - lam_loc))
        u = gather_face_values(sys_.grid, u_loc)
        fd = sys_.faces
        u[fd.flux_faces] = fd.flux_values[fd.flux_faces]
        return theta, u


def gather_face_values(grid: CartesianGrid, u_loc: np.ndarray) -> np.ndarray:
    """Average per-cell face fluxes onto global faces."""
    cf = grid.cell_faces.ravel()
    acc = np.bincount(cf, weights=u_loc.ravel(), minlength=grid.n_faces)
    cnt = np.bincount(cf, minlength=grid.n_faces)
    return acc / np.maximum(cnt, 1)


def hybridize_and_condense(system: SaddleSystem, cfg: Optional[SolverConfig] = None) -> CondensedSystem:
    """Eliminate theta and the broken fluxes cellwise; return the multiplier system.

    Uses A^-1 = N^-1 M N^-1 for the velocity mass A = N M^-1 N, so the
    weighted mass is never inverted.
    """
    N = system.N
    Ninv = np.linalg.inv(N)
    Ainv = np.einsum("ij,cjk,kl->cil", Ninv, system.M, Ninv)
    n = system.n_cells
    s = np.broadcast_to(LOCAL_FACE_SIGN, (n, 6))
    mult = system.faces.mult_of_face[system.grid.cell_faces]
    op = CondensedOperator(Ainv, s, mult, system.faces.n_mult, system.faces.fixed,
                           np.full(n, system.grid.cell_volume), cfg)
    return CondensedSystem(system, op, Ninv)


@dataclass
class ExpandedSolution:
    grid: CartesianGrid
    theta: np.ndarray  # (n_cells, 6) broken RT0 coefficients
    u: np.ndarray  # (n_faces,) +axis fluxes
    p: np.ndarray  # (n_cells,)
    lam: Optional[np.ndarray] = None  # (n_faces,) face pressure traces
    residuals: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def u_local(self) -> np.ndarray:
        return self.u[self.grid.cell_faces]

    @property
    def trace(self) -> Optional[np.ndarray]:
        """Multipliers on interior faces only."""
        return None if self.lam is None else self.lam[self.grid.interior_faces]

    def velocity_norm(self) -> float:
        return l2_norm(self.grid, self.u_local)

    def gradient_norm(self) -> float:
        return l2_norm(self.grid, self.theta)


def l2_norm(grid: CartesianGrid, coeffs: np.ndarray) -> float:
    """L2 norm of a (broken) RT0 field given by (n_cells, 6) coefficients."""
    N = pairing_matrix(grid)
    return float(np.sqrt(max(np.einsum("ci,ij,cj->", coeffs, N, coeffs), 0.0)))


def cell_divergence(grid: CartesianGrid, u: np.ndarray) -> np.ndarray:
    """int_K div u for every cell from face fluxes."""
    return (LOCAL_FACE_SIGN[None, :] * u[grid.cell_faces]).sum(axis=1)


def _residuals(system: SaddleSystem, theta, u, p) -> dict:
    b = system.blocks
    uu = u[system.velocity_dofs]
    r1 = b["A1"] @ theta.ravel() + b["B1"].T @ uu - b["rhs1"]
    r2 = b["B1"] @ theta.ravel() + b["B"].T @ p - b["rhs2"]
    r3 = b["B"] @ uu - b["rhs3"]

    def rel(r, ref):
        return float(np.linalg.norm(r) / max(np.linalg.norm(ref), 1e-300))

    scale1 = np.linalg.norm(b["A1"] @ theta.ravel()) + np.linalg.norm(b["rhs1"])
    scale2 = np.linalg.norm(b["B1"] @ theta.ravel()) + np.linalg.norm(b["B"].T @ p) + np.linalg.norm(b["rhs2"])
    return {
        "first": rel(r1, scale1 or 1.0),
        "second": rel(r2, scale2 or 1.0),
        "divergence": rel(r3, np.abs(system.F).sum() + np.abs(b["rhs3"]).sum() or 1.0),
    }


def solve_expanded_fine(system: SaddleSystem, solver_cfg: Optional[SolverConfig] = None,
                        check_residuals: bool = True) -> ExpandedSolution:
    """Solve a fine system through hybridisation and static condensation."""
    cfg = solver_cfg or SolverConfig()
    if cfg.method == "saddle":
        return solve_saddle_direct(system)
    cond = hybridize_and_condense(system, cfg)
    z = None
    if system.g1 is not None:
        z = np.einsum("ij,cj->ci", cond.Ninv, system.g1)
    p, lam, u_loc = cond.operator.solve(system.F, h=system.faces.flux_rhs, z=z,
                                        fixed_values=system.faces.fixed_values)
    theta, u = cond.recover(p, lam, u_loc)
    sol = ExpandedSolution(system.grid, theta, u, p, lam,
                           stats={"method": cond.operator.method, "n_multipliers": len(cond.operator.free)})
    if check_residuals:
        sol.residuals = _residuals(system, theta, u, p)
        worst = max(sol.residuals.values())
        if worst > max(1e3 * cfg.tol, 1e-8):
            raise SolverError(f"residual {worst:.2e} above tolerance", residuals=[worst])
    return sol


def solve_saddle_direct(system: SaddleSystem) -> ExpandedSolution:
    """Direct sparse solve of the unreduced three-field system (test oracle)."""
    K, rhs = system.saddle_matrix()
    n = system.n_cells
    nt = 6 * n
    nu = len(system.velocity_dofs)
    if system.faces.pure_neumann:
        w = np.zeros(K.shape[0])
        w[nt + nu:] = system.grid.cell_volume
        K = sp.bmat([[K, sp.csr_matrix(w[:, None])], [sp.csr_matrix(w[None, :]), None]], format="csc")
        rhs = np.concatenate([rhs, [0.0]])
    x = spla.spsolve(K.tocsc(), rhs)
    theta = x[:nt].reshape(n, 6)
    u = np.zeros(system.grid.n_faces)
    fd = system.faces
    u[fd.flux_faces] = fd.flux_values[fd.flux_faces]
    umap = system._u_map
    has = umap >= 0
    u[has] = x[nt:nt + nu][umap[has]]
    p = x[nt + nu:nt + nu + n]
    sol = ExpandedSolution(system.grid, theta, u, p, None, stats={"method": "saddle"})
    sol.residuals = _residuals(system, theta, u, p)
    return sol


# ---------------------------------------------------------------------------
# local Neumann problems on subgrids
# ---------------------------------------------------------------------------
class LocalNeumannSolver:
    """Factorised all-flux-boundary problem on a box, reused for many data sets."""

    def __init__(self, grid: CartesianGrid, M: np.ndarray, cfg: Optional[SolverConfig] = None):
        self.grid = grid
        self.M = M
        self.system = SaddleSystem(grid, M, pairing_matrix(grid), np.zeros(grid.n_cells),
                                   resolve_boundary(grid, BoundaryCondition.prescribed_flux(np.zeros(grid.n_faces))))
        self.cond = hybridize_and_condense(self.system, cfg or SolverConfig(method="direct"))
        self.boundary = grid.boundary_face_mask
        fc = grid.face_cells
        self._out_sign = np.where(fc[:, 1] < 0, 1.0, -1.0)

    def solve(self, div_target, boundary_flux, tol: float = 1e-12):
        """Solve div u = div_target (per cell, constant), u.n = boundary_flux.

        ``div_target`` has shape (n_cells[, r]) and is the pointwise divergence;
        ``boundary_flux`` has shape (n_faces[, r]) with +axis fluxes (boundary
        rows are used). Returns (theta, u, p), p mean-zero.
        """
        grid = self.grid
        D = np.asarray(div_target, dtype=float)
        G = np.asarray(boundary_flux, dtype=float)
        batch = D.ndim == 2
        D = D.reshape(grid.n_cells, -1)
        G = G.reshape(grid.n_faces, -1)
        F = D * grid.cell_volume
        h = np.zeros_like(G)
        h[self.boundary] = (self._out_sign[:, None] * G)[self.boundary]
        net = F.sum(axis=0) - h.sum(axis=0)
        scale = np.abs(F).sum(axis=0) + np.abs(h).sum(axis=0)
        if np.any(np.abs(net) > tol * np.maximum(scale, 1.0)):
            raise CompatibilityError(f"local Neumann data incompatible (net flux {net})")
        p, lam, u_loc = self.cond.operator.solve(F, h=h)
        Ninv = self.cond.Ninv
        cf = grid.cell_faces
        lam_loc = lam[cf]
        theta = -np.einsum("ij,cjr->cir", Ninv, LOCAL_FACE_SIGN[None, :, None] * (p[:, None, :] - lam_loc))
        u = gather_face_values_batch(grid, u_loc)
        u[self.boundary] = G[self.boundary]
        if not batch:
            return theta[..., 0], u[:, 0], p[:, 0]
        return theta, u, p


def gather_face_values_batch(grid: CartesianGrid, u_loc: np.ndarray) -> np.ndarray:
    n, m, r = u_loc.shape
    cf = grid.cell_faces
    out = np.zeros((grid.n_faces, r))
    np.add.at(out, cf.ravel(), u_loc.reshape(n * m, r))
    cnt = np.bincount(cf.ravel(), minlength=grid.n_faces)
    return out / np.maximum(cnt, 1)[:, None]


def solve_local_neumann(subgrid, k, div_target, boundary_flux, rule: Optional[str] = None) -> ExpandedSolution:
    """Expanded mixed solve on a subgrid with all normal fluxes prescribed.

    ``subgrid`` is a :class:`Subgrid` of k's grid (or a grid matching k);
    ``k`` is a CoefficientField or precomputed (n, 6, 6) mass matrices.
    """
    if isinstance(subgrid, Subgrid):
        grid = subgrid.grid
        M = weighted_mass(k, rule, cells=subgrid.cells) if isinstance(k, CoefficientField) else k
    else:
        grid = subgrid
        M = weighted_mass(k, rule) if isinstance(k, CoefficientField) else k
    check_cell_blocks(M, pairing_matrix(grid))
    solver = LocalNeumannSolver(grid, M)
    div_target = np.broadcast_to(np.asarray(div_target, dtype=float), (grid.n_cells,))
    theta, u, p = solver.solve(div_target, boundary_flux)
    return ExpandedSolution(grid, theta, u, p)
