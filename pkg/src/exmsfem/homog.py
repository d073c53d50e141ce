"""Periodic homogenization with the expanded mixed discretization.

The corrector N_i solves ``-div(k (grad N_i + e_i)) = 0`` on the periodic
unit cell Y with zero mean. In expanded mixed form, theta = grad N_i and
u = -k (theta + e_i). The constant part enters the first equation as
``g1 = -int k e_i . xi``. Then ``k* e_i = <k (grad N_i + e_i)> = -<u>``.
For the discrete solution this equals the symmetric energy form
``<k (theta_i + e_i) . (theta_j + e_j)>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DegenerateCoefficient
from .fem import (BoundaryCondition, ExpandedSolution, SolverConfig, assemble_expanded_fine,
                  solve_expanded_fine)
from .fields import CoefficientField, make_permeability, quadrature_rule
from .grid import CartesianGrid


@dataclass
class CellProblemResult:
    k_star: np.ndarray  # (d, d)
    correctors: np.ndarray  # (d, n_cells) zero-mean P0 correctors
    solutions: list = field(default_factory=list, repr=False)
    bounds: tuple = (np.nan, np.nan)  # (harmonic mean, arithmetic mean) of k over Y

    def check_bounds(self, rtol: float = 1e-8) -> bool:
        """Voigt-Reuss: every eigenvalue of k* lies between the two means."""
        lo, hi = self.bounds
        ev = np.linalg.eigvalsh(0.5 * (self.k_star + self.k_star.T))
        return bool(ev.min() >= lo * (1 - rtol) and ev.max() <= hi * (1 + rtol))


def _cell_field(k_Y, cell_grid) -> CoefficientField:
    if isinstance(k_Y, CoefficientField):
        if k_Y.grid != cell_grid:
            raise ConfigError("cell coefficient is not defined on the cell grid")
        return k_Y
    vals = np.asarray(k_Y, dtype=float).ravel()
    return make_permeability("user_table", cell_grid, {"values": vals})


def constant_load(fld: CoefficientField, direction: int, rule: Optional[str] = None) -> np.ndarray:
    """First-equation data ``-int_K k e_i . phi_j`` per cell and local face, (n, 6)."""
    grid = fld.grid
    a = direction
    aniso = float(fld.anisotropy[a])
    out = np.zeros((grid.n_cells, 6))
    rule = rule or fld.default_rule
    scale = grid.cell_volume / grid.face_area(a) * aniso
    if fld.is_cellwise_constant or rule == "midpoint":
        kc = fld.cell_values if fld.is_cellwise_constant else fld.evaluate(
            np.arange(grid.n_cells), np.full((1, 3), 0.5))[:, 0]
        out[:, 2 * a] = out[:, 2 * a + 1] = -0.5 * scale * kc
        return out
    pts, w = quadrature_rule(rule)
    vals = fld.evaluate(np.arange(grid.n_cells), pts)
    xi = pts[:, a]
    out[:, 2 * a] = -scale * vals @ (w * (1.0 - xi))
    out[:, 2 * a + 1] = -scale * vals @ (w * xi)
    return out


def mean_velocity(grid: CartesianGrid, u_local: np.ndarray) -> np.ndarray:
    """Volume average of an RT0 field given by per-cell local fluxes."""
    out = np.empty(3)
    for a in range(3):
        out[a] = 0.5 * grid.h[a] * (u_local[:, 2 * a] + u_local[:, 2 * a + 1]).sum() / grid.volume
    return out


def coefficient_means(fld: CoefficientField, rule: Optional[str] = None):
    """(harmonic, arithmetic) means of k over the grid, by quadrature."""
    pts, w, vals = fld.quadrature(rule)
    if np.any(vals <= 0):
        harmonic = 0.0
    else:
        harmonic = 1.0 / float(np.mean((1.0 / vals) @ w))
    return harmonic, float(np.mean(vals @ w))


def homogenize_cell(k_Y, cell_grid: CartesianGrid, rule: Optional[str] = None,
                    cfg: Optional[SolverConfig] = None) -> CellProblemResult:
    """Solve the three periodic cell problems and return k*.

    Axes with a single cell are allowed (a z-invariant cell becomes an
    (n, n, 1) grid); their corrector vanishes and k* picks up the
    arithmetic mean there.
    """
    fld = _cell_field(k_Y, cell_grid)
    means = fld.cell_means(rule)
    if np.any(means <= 0):
        raise DegenerateCoefficient("cell coefficient vanishes on whole cells", cells=np.flatnonzero(means <= 0))
    bc = BoundaryCondition.periodic()
    k_star = np.zeros((3, 3))
    corr = np.zeros((3, cell_grid.n_cells))
    sols = []
    for a in range(3):
        g1 = constant_load(fld, a, rule)
        sol = solve_expanded_fine(assemble_expanded_fine(cell_grid, fld, None, bc, rule, g1=g1), cfg)
        sols.append(sol)
        corr[a] = sol.p
        k_star[:, a] = -mean_velocity(cell_grid, sol.u_local)
    return CellProblemResult(k_star, corr, sols, coefficient_means(fld, rule))


def homogenized_reference(k_star, f, grid, bc: Optional[BoundaryCondition] = None,
                          cfg: Optional[SolverConfig] = None) -> ExpandedSolution:
    """Fine expanded mixed solve with the constant tensor k* (diagonal tensors only)."""
    K = np.atleast_2d(np.asarray(k_star, dtype=float))
    if K.shape == (1, 1):
        K = K[0, 0] * np.eye(3)
    if K.shape != (3, 3):
        raise ConfigError("k* must be a scalar or a 3x3 tensor")
    off = K - np.diag(np.diag(K))
    if np.abs(off).max() > 1e-10 * np.abs(K).max():
        raise ConfigError("full-tensor permeability is not supported; k* must be diagonal")
    if np.any(np.linalg.eigvalsh(0.5 * (K + K.T)) <= 0):
        raise ConfigError("k* must be positive definite")
    grid = getattr(grid, "fine", grid)
    d = np.diag(K)
    fld = make_permeability("uniform", grid, {"value": 1.0, "anisotropy": tuple(d)})
    return solve_expanded_fine(assemble_expanded_fine(grid, fld, f, bc), cfg)


def laminate_k_star(a: float, b: float) -> np.ndarray:
    """Closed form for layers of equal width normal to x: diag(harmonic, arithmetic, arithmetic)."""
    return np.diag([2 * a * b / (a + b), 0.5 * (a + b), 0.5 * (a + b)])


def write_k_star(path, k_star) -> None:
    np.savetxt(path, np.asarray(k_star), fmt="%.16e")
