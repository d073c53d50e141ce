"""Coarse expanded mixed systems built from a multiscale basis.

Per coarse cell K with local basis functions (psi_m, eta_m), m < m_K:

* ``A1_K[m, n] = int_K k_eff eta_m . eta_n`` (k_eff may differ from the k
  used to build the basis, e.g. mobility weighting);
* ``B1_K[m, n] = int_K eta_m . psi_n``;
* ``d_K[m] = int_K div psi_m`` (= +-1 by the flux normalisation).

The non-hybrid solve assembles the three-field coarse saddle system with
shared face dofs. The hybrid solve breaks the dofs per cell, eliminates
theta and u cell by cell, and solves for one multiplier per coarse dof with
the same condensation engine as the fine solver. Boundary dofs carry the
no-flow condition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import CoarseBasisSet
from .exceptions import CompatibilityError, ConfigError, DegenerateBasis
from .fem import CondensedOperator, SolverConfig, gather_face_values, pairing_matrix, weighted_mass
from .fields import CoefficientField, SourceField

log = logging.getLogger(__name__)


@dataclass
class CoarseSystem:
    basis: CoarseBasisSet
    A1: list  # per K, (m_K, m_K)
    B1: list  # per K, (m_K, m_K)
    div: list  # per K, (m_K,)
    F: np.ndarray  # (n_coarse,) int_K f
    dof_boundary: np.ndarray  # bool per dof, no-flow

    @property
    def n_cells(self) -> int:
        return len(self.A1)

    @property
    def n_dofs(self) -> int:
        return self.basis.n_dofs

    @property
    def theta_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(d) for d in self.div])])


@dataclass
class CoarseSolution:
    theta: list  # per K, coefficients of eta
    u_cell: list  # per K, coefficients of psi (broken)
    u: np.ndarray  # (n_dofs,) shared coefficients
    p: np.ndarray  # (n_coarse,)
    lam: Optional[np.ndarray] = None  # (n_dofs,) multipliers (hybrid)
    mode: str = "nonhybrid"
    stats: dict = field(default_factory=dict)

    def theta_vector(self) -> np.ndarray:
        return np.concatenate(self.theta)


@dataclass
class DownscaledSolution:
    grid: object
    theta: np.ndarray  # (n_fine, 6)
    u_local: np.ndarray  # (n_fine, 6) per-cell fluxes (broken for oversampling)
    u: np.ndarray  # (n_faces,) face fluxes, two sides averaged
    p: np.ndarray  # (n_fine,)
    conforming: bool = True
    coarse: Optional[CoarseSolution] = None

    def velocity_norm(self) -> float:
        from .fem import l2_norm
        return l2_norm(self.grid, self.u_local)

    def gradient_norm(self) -> float:
        from .fem import l2_norm
        return l2_norm(self.grid, self.theta)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------
def _source_integrals(pair, f) -> np.ndarray:
    if f is None:
        return np.zeros(pair.fine.n_cells)
    if isinstance(f, SourceField):
        if f.grid != pair.fine:
            raise ConfigError("source is not defined on the fine grid")
        return f.cell_integrals
    F = np.asarray(f, dtype=float)
    if F.shape != (pair.fine.n_cells,):
        raise ConfigError(f"fine source integrals must have shape ({pair.fine.n_cells},)")
    return F


class CoarseAssembler:
    """Caches per-fine-cell products of a basis for repeated reassembly.

    ``assemble(f, cell_scale)`` forms A1 for ``k_eff = cell_scale * k`` (one
    factor per fine cell) without revisiting the fine mass matrices.
    """

    def __init__(self, basis: CoarseBasisSet, k, rule: Optional[str] = None):
        pair = basis.pair
        if isinstance(k, CoefficientField):
            if k.grid != pair.fine:
                raise ConfigError("coefficient field grid does not match the basis fine grid")
            M = weighted_mass(k, rule)
        else:
            M = np.asarray(k, dtype=float)
            if M.shape != (pair.fine.n_cells, 6, 6):
                raise ConfigError(f"mass array must have shape ({pair.fine.n_cells}, 6, 6)")
        self.basis = basis
        N = pairing_matrix(pair.fine)
        self.products, self.B1, self.div, self.cells = [], [], [], []
        for K in range(pair.coarse.n_cells):
            sub = basis.subgrid(K)
            eta = basis.eta[K]
            self.cells.append(sub.cells)
            self.products.append(np.einsum("mci,cij,ncj->cmn", eta, M[sub.cells], eta))
            self.B1.append(np.einsum("mci,ij,ncj->mn", eta, N, basis.psi_local(K)))
            self.div.append(basis.divergence(K).sum(axis=1))
        coarse = pair.coarse
        self.dof_boundary = coarse.boundary_face_mask[basis.dof_face]

    def assemble(self, f=None, cell_scale=None) -> CoarseSystem:
        pair = self.basis.pair
        Ff = _source_integrals(pair, f)
        F = np.bincount(pair.coarse_of_fine, weights=Ff, minlength=pair.coarse.n_cells)
        if cell_scale is None:
            A1 = [P.sum(axis=0) for P in self.products]
        else:
            w = np.asarray(cell_scale, dtype=float)
            A1 = [np.einsum("c,cmn->mn", w[c], P) for c, P in zip(self.cells, self.products)]
        A1 = [0.5 * (A + A.T) for A in A1]
        return CoarseSystem(self.basis, A1, self.B1, self.div, F, self.dof_boundary)


def assemble_coarse(basis: CoarseBasisSet, k_eff, f=None, rule: Optional[str] = None) -> CoarseSystem:
    """Coarse blocks by exact fine-grid quadrature of the stored basis."""
    return CoarseAssembler(basis, k_eff, rule).assemble(f)


# ---------------------------------------------------------------------------
# solves
# ---------------------------------------------------------------------------
def _check_balance(system: CoarseSystem):
    F = system.F
    if abs(F.sum()) > 1e-12 * max(np.abs(F).sum(), 1e-300):
        raise CompatibilityError(f"coarse no-flow problem needs a balanced source (net {F.sum():.3e})")


def _velocity_mass_inverse(system: CoarseSystem, K: int) -> np.ndarray:
    """(B1^T A1^-1 B1)^-1 = B1^-1 A1 B1^-T for coarse cell K."""
    A1, B1 = system.A1[K], system.B1[K]
    try:
        np.linalg.cholesky(A1)
        X = np.linalg.solve(B1, A1)
        Ainv = np.linalg.solve(B1, X.T).T
    except np.linalg.LinAlgError as exc:
        raise DegenerateBasis(f"singular coarse cell block on coarse cell {K}", cell=K) from exc
    if not np.all(np.isfinite(Ainv)) or np.linalg.cond(B1) > 1e14:
        raise DegenerateBasis(f"singular coarse cell block on coarse cell {K}", cell=K)
    return 0.5 * (Ainv + Ainv.T)


def solve_coarse_nonhybrid(system: CoarseSystem) -> CoarseSolution:
    """Direct solve of the coarse three-field system with a mean-zero pressure row."""
    _check_balance(system)
    basis = system.basis
    nK = system.n_cells
    off = system.theta_offsets
    nt = off[-1]
    free = np.flatnonzero(~system.dof_boundary)
    umap = -np.ones(system.n_dofs, dtype=np.int64)
    umap[free] = np.arange(len(free))
    nu = len(free)
    rows, cols, vals = [], [], []

    def put(r, c, v):
        rr, cc = np.meshgrid(r, c, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(np.asarray(v).ravel())

    for K in range(nK):
        th = np.arange(off[K], off[K + 1])
        d = umap[basis.cell_dofs[K]]
        keep = d >= 0
        put(th, th, system.A1[K])
        put(th, nt + d[keep], system.B1[K][:, keep])
        put(nt + d[keep], th, system.B1[K][:, keep].T)
        put(nt + d[keep], [nt + nu + K], system.div[K][keep][:, None])
        put([nt + nu + K], nt + d[keep], system.div[K][keep][None, :])
    n = nt + nu + nK
    vol = basis.pair.coarse.cell_volume
    # bordering row/column for the mean-zero pressure
    put([n], nt + nu + np.arange(nK), np.full((1, nK), vol))
    put(nt + nu + np.arange(nK), [n], np.full((nK, 1), vol))
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n + 1, n + 1)).tocsc()
    rhs = np.zeros(n + 1)
    rhs[nt + nu:nt + nu + nK] = system.F
    x = spla.spsolve(A, rhs)
    u = np.zeros(system.n_dofs)
    u[free] = x[nt:nt + nu]
    theta = [x[off[K]:off[K + 1]] for K in range(nK)]
    u_cell = [u[basis.cell_dofs[K]] for K in range(nK)]
    return CoarseSolution(theta, u_cell, u, x[nt + nu:n].copy(), None, "nonhybrid",
                          {"n_unknowns": n})


def condensed_coarse_operator(system: CoarseSystem, cfg: Optional[SolverConfig] = None) -> CondensedOperator:
    basis = system.basis
    nK = system.n_cells
    m = max(len(d) for d in system.div)
    dummy = system.n_dofs
    Ainv = np.tile(np.eye(m), (nK, 1, 1))
    s = np.zeros((nK, m))
    mult = np.full((nK, m), dummy)
    for K in range(nK):
        mk = len(system.div[K])
        Ainv[K, :mk, :mk] = _velocity_mass_inverse(system, K)
        s[K, :mk] = system.div[K]
        mult[K, :mk] = basis.cell_dofs[K]
    fixed = np.zeros(system.n_dofs + 1, dtype=bool)
    fixed[dummy] = True
    cfg = cfg or SolverConfig(method="direct")
    return CondensedOperator(Ainv, s, mult, system.n_dofs + 1, fixed,
                             np.full(nK, basis.pair.coarse.cell_volume), cfg, pure_neumann=True)


def solve_coarse_hybrid(system: CoarseSystem, cfg: Optional[SolverConfig] = None,
                        operator: Optional[CondensedOperator] = None) -> CoarseSolution:
    """Hybridised solve: cellwise elimination, SPD multiplier system, recovery."""
    _check_balance(system)
    op = operator or condensed_coarse_operator(system, cfg)
    p, lam, u_loc = op.solve(system.F)
    basis = system.basis
    nK = system.n_cells
    u_cell, theta = [], []
    for K in range(nK):
        mk = len(system.div[K])
        uK = u_loc[K, :mk]
        u_cell.append(uK)
        theta.append(-np.linalg.solve(system.A1[K], system.B1[K] @ uK))
    # shared coefficients: average the two sides (they agree by continuity)
    acc = np.zeros(system.n_dofs)
    cnt = np.zeros(system.n_dofs)
    for K in range(nK):
        np.add.at(acc, basis.cell_dofs[K], u_cell[K])
        np.add.at(cnt, basis.cell_dofs[K], 1.0)
    u = acc / np.maximum(cnt, 1.0)
    return CoarseSolution(theta, u_cell, u, p, lam[:system.n_dofs].copy(), "hybrid",
                          {"n_multipliers": len(op.free)})


def solve_coarse(system: CoarseSystem, mode: str = "hybrid", cfg: Optional[SolverConfig] = None) -> CoarseSolution:
    if mode == "hybrid":
        return solve_coarse_hybrid(system, cfg)
    if mode == "nonhybrid":
        return solve_coarse_nonhybrid(system)
    raise ConfigError(f"unknown coarse solve mode {mode!r}")


# ---------------------------------------------------------------------------
# fine-grid reconstruction and diagnostics
# ---------------------------------------------------------------------------
def downscale(solution: CoarseSolution, basis: CoarseBasisSet) -> DownscaledSolution:
    pair = basis.pair
    fine = pair.fine
    theta = np.zeros((fine.n_cells, 6))
    u_loc = np.zeros((fine.n_cells, 6))
    p = solution.p[pair.coarse_of_fine].copy()
    for K in range(pair.coarse.n_cells):
        cells = basis.subgrid(K).cells
        u_loc[cells] = np.einsum("m,mci->ci", solution.u_cell[K], basis.psi_local(K))
        theta[cells] = np.einsum("m,mci->ci", solution.theta[K], basis.eta[K])
    u = gather_face_values(fine, u_loc)
    return DownscaledSolution(fine, theta, u_loc, u, p, basis.conforming, solution)


def face_jumps(fine, u_local: np.ndarray) -> np.ndarray:
    """Difference of the two one-sided fluxes on every fine face (0 on the boundary)."""
    cf = fine.cell_faces
    fc = fine.face_cells
    jump = np.zeros(fine.n_faces)
    inner = fc[:, 0] >= 0
    inner &= fc[:, 1] >= 0
    # local index of face f in cell fc[f,0] is its + side (odd), in fc[f,1] the - side
    axis = fine.face_axis
    f = np.flatnonzero(inner)
    jump[f] = u_local[fc[f, 0], 2 * axis[f] + 1] - u_local[fc[f, 1], 2 * axis[f]]
    return jump


def jump_norm(down: DownscaledSolution) -> float:
    """L2 norm of the normal-flux jump over fine faces: sqrt(sum jump^2 / |e|)."""
    fine = down.grid
    j = face_jumps(fine, down.u_local)
    return float(np.sqrt(np.sum(j * j / fine.face_areas)))


def coarse_conservation(system: CoarseSystem, solution: CoarseSolution) -> np.ndarray:
    """Per coarse cell: int_K div u - int_K f."""
    return np.array([system.div[K] @ solution.u_cell[K] for K in range(system.n_cells)]) - system.F
