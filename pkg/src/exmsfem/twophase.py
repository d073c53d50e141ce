"""IMPES two-phase flow with a fixed multiscale basis.

Each time step solves the pressure equation ``-div(lambda(S) k grad p) = q``.
The coarse pipelines reassemble the coarse system with ``k_eff = lambda(S) k``
on the fixed basis and downscale it. The reference pipeline solves the fine
expanded mixed system. The saturation is then advanced by explicit
first-order upwinding with fractional flow ``f_w``. Porosity is 1 unless
configured otherwise.
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basis import build_global_basis, build_local_basis, build_oversampled_basis, compute_solution_global_field
from .coarse import CoarseAssembler, condensed_coarse_operator, downscale, solve_coarse_hybrid
from .exceptions import CFLError, ConfigError, DomainError
from .fem import (SolverConfig, assemble_expanded_fine, gather_face_values, hybridize_and_condense,
                  solve_expanded_fine)
from .fields import SourceField
from .grid import LOCAL_FACE_SIGN, NestedGridPair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MobilityModel:
    mu_w: float = 0.5
    mu_o: float = 1.0
    linear: bool = False  # test mode: f_w(S) = S and lambda = 1

    def __post_init__(self):
        if self.mu_w <= 0 or self.mu_o <= 0:
            raise ConfigError("viscosities must be positive")

    def max_dfw(self) -> float:
        """max f_w' on [0, 1] (sampled finely, with a small safety margin)."""
        if self.linear:
            return 1.0
        s = np.linspace(0.0, 1.0, 20001)
        fw = mobilities(s, self)[3]
        return float(np.max(np.diff(fw) / np.diff(s))) * 1.01


def mobilities(S, model: MobilityModel):
    """(lambda_w, lambda_o, lambda_total, f_w) for saturations S in [0, 1]."""
    S = np.asarray(S, dtype=float)
    if S.size and not (S.min() >= -1e-12 and S.max() <= 1 + 1e-12):
        raise DomainError("water saturation outside [0, 1]")
    S = np.clip(S, 0.0, 1.0)
    if model.linear:
        one = np.ones_like(S)
        return S.copy(), 1.0 - S, one, S.copy()
    lw = S * S / model.mu_w
    lo = (1.0 - S) ** 2 / model.mu_o
    lt = lw + lo
    return lw, lo, lt, lw / lt


@dataclass
class SaturationState:
    S: np.ndarray
    time: float = 0.0
    step: int = 0

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        if np.any(self.S < -1e-12) or np.any(self.S > 1 + 1e-12):
            raise DomainError("water saturation outside [0, 1]")


@dataclass(frozen=True)
class WellConfig:
    """Injector and producer coarse cells with a rate density (volume rate per volume)."""

    injector: int
    producer: int
    rate: float = 1.0

    @classmethod
    def two_spot(cls, pair: NestedGridPair, rate: float = 1.0):
        nx, ny, _ = pair.coarse.counts
        return cls(pair.coarse.cell_index(0, 0, 0), pair.coarse.cell_index(nx - 1, ny - 1, 0), rate)

    def density(self, pair: NestedGridPair, well_pair: Optional[NestedGridPair] = None) -> np.ndarray:
        """q per fine cell. ``well_pair`` names the coarse grid the wells live on (default: ``pair``)."""
        wp = well_pair or pair
        owner = wp.coarse_of_fine
        q = np.zeros(pair.fine.n_cells)
        q[owner == self.injector] = self.rate
        q[owner == self.producer] = -self.rate
        return q


class UpwindTransport:
    """Explicit first-order upwind update on a fixed grid and well pattern."""

    def __init__(self, grid, q: np.ndarray, model: MobilityModel, porosity: float = 1.0):
        self.grid, self.model, self.porosity = grid, model, porosity
        self.q = np.asarray(q, dtype=float)
        fc = grid.face_cells
        inner = (fc[:, 0] >= 0) & (fc[:, 1] >= 0)
        self.inner = np.flatnonzero(inner)
        self.lo, self.hi = fc[inner, 0], fc[inner, 1]
        self.inj = np.maximum(self.q, 0.0) * grid.cell_volume
        self.prod = np.minimum(self.q, 0.0) * grid.cell_volume
        self.dfw = model.max_dfw()
        self.pv = porosity * grid.cell_volume

    def limit(self, u: np.ndarray) -> float:
        """Largest stable step: pore volume / (max f_w' * outflow) over cells."""
        n = self.grid.n_cells
        ui = u[self.inner]
        out = np.bincount(self.lo, np.maximum(ui, 0.0), n) + np.bincount(self.hi, np.maximum(-ui, 0.0), n)
        out -= self.prod
        worst = out.max() * self.dfw
        return math.inf if worst <= 0 else self.pv / worst

    def net_outflow(self, u: np.ndarray, fw: np.ndarray) -> np.ndarray:
        ui = u[self.inner]
        flux_w = ui * fw[np.where(ui >= 0, self.lo, self.hi)]
        n = self.grid.n_cells
        return np.bincount(self.lo, flux_w, n) - np.bincount(self.hi, flux_w, n)

    def step(self, S: np.ndarray, u: np.ndarray, dt: float, check: bool = True):
        """(new S, water produced) after one step; injectors inject pure water."""
        if check:
            limit = self.limit(u)
            if dt > limit * (1 + 1e-12):
                raise CFLError(f"time step {dt:.3e} above CFL limit {limit:.3e}", limit=limit)
        fw = mobilities(S, self.model)[3]
        produced = self.prod * fw
        Snew = S + dt / self.pv * (self.inj + produced - self.net_outflow(u, fw))
        if Snew.min() < -1e-10 or Snew.max() > 1 + 1e-10:
            raise DomainError(f"saturation left [0, 1] (min {Snew.min():.3e}, max {Snew.max():.3e})")
        return np.clip(Snew, 0.0, 1.0), float(produced.sum())


def cfl_limit(grid, u_faces: np.ndarray, q: np.ndarray, model: MobilityModel, porosity: float = 1.0) -> float:
    """Largest stable explicit step for the face fluxes ``u_faces``."""
    return UpwindTransport(grid, q, model, porosity).limit(u_faces)


def transport_step(state: SaturationState, velocity, q: np.ndarray, model: MobilityModel, dt: float,
                   grid=None, porosity: float = 1.0) -> SaturationState:
    """One explicit upwind step; ``velocity`` holds +axis face fluxes or a solution with ``.u``.

    Raises CFLError when dt exceeds the stability limit.
    """
    grid = grid if grid is not None else velocity.grid
    u = velocity.u if hasattr(velocity, "u") else np.asarray(velocity, dtype=float)
    S, _ = UpwindTransport(grid, q, model, porosity).step(state.S, u, dt)
    return SaturationState(S, state.time + dt, state.step + 1)


def water_in_place(state: SaturationState, grid, porosity: float = 1.0) -> float:
    return float(porosity * grid.cell_volume * state.S.sum())


# ---------------------------------------------------------------------------
# pressure solvers
# ---------------------------------------------------------------------------
class FinePressure:
    """Reference fine pressure solves for a changing total mobility.

    The condensed operator for ``lambda k`` is the base operator with every
    cell block scaled by ``lambda``. It is solved by CG preconditioned with
    the exact factorization at ``lambda = 1``, warm-started from the last step.
    """

    def __init__(self, grid, k, q, tol: float = 1e-12):
        self.grid = grid
        self.system = assemble_expanded_fine(grid, k, q)
        self.cond = hybridize_and_condense(self.system, SolverConfig(method="direct"))
        self.cond.operator.factor()
        self.precond = self.cond.operator.as_preconditioner()
        self.cfg = SolverConfig(method="cg", tol=tol, maxiter=2000)
        self._lam = None

    def solve(self, total_mobility) -> np.ndarray:
        fd = self.system.faces
        op = self.cond.operator.scaled(total_mobility, self.cfg)
        op.precond = self.precond
        p, lam, u_loc = op.solve(self.system.F, h=fd.flux_rhs, x0=self._lam)
        self._lam = lam
        u = gather_face_values(self.grid, u_loc)
        u[fd.flux_faces] = fd.flux_values[fd.flux_faces]
        return u


class CoarsePressure:
    """Fixed-basis coarse pressure solves with mobility-weighted reassembly."""

    def __init__(self, basis, k, q):
        self.basis = basis
        self.assembler = CoarseAssembler(basis, k)
        self.q_int = q * basis.pair.fine.cell_volume

    def solve(self, total_mobility) -> np.ndarray:
        system = self.assembler.assemble(self.q_int, cell_scale=total_mobility)
        sol = solve_coarse_hybrid(system, SolverConfig(method="direct"))
        return downscale(sol, self.basis).u


def pressure_step(state: SaturationState, basis, k, wells, model: MobilityModel, q=None):
    """Downscaled coarse velocity for the current saturation (rebuilds the assembler)."""
    pair = basis.pair
    q = wells.density(pair) if q is None else q
    lt = mobilities(state.S, model)[2]
    system = CoarseAssembler(basis, k).assemble(q * pair.fine.cell_volume, cell_scale=lt)
    return downscale(solve_coarse_hybrid(system), basis)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------
@dataclass
class ImpesConfig:
    n_steps: int = 2000
    pore_volumes: float = 1.0  # injected over the whole horizon
    horizon: Optional[float] = None  # overrides pore_volumes when set
    variants: tuple = ("global", "local")
    layers: int = 1
    snapshot_steps: tuple = (700,)
    cfl_safety: float = 0.9
    porosity: float = 1.0
    track_reference: bool = True
    max_substeps: int = 100000


@dataclass
class ImpesResult:
    names: list
    errors: np.ndarray  # (n_steps + 1, n_variants) relative L2 saturation error vs reference
    snapshots: dict  # step -> {name: S}
    balance: dict  # name -> max |water balance residual| per step
    substeps: dict  # name -> total substeps
    final: dict  # name -> SaturationState
    dt: float = 0.0
    min_S: float = 0.0
    max_S: float = 1.0
    timings: dict = field(default_factory=dict)


def _advance(state, u, transport: UpwindTransport, dt, cfg: ImpesConfig, tally):
    """Advance by dt with enough CFL substeps; returns (state, relative water balance residual)."""
    limit = transport.limit(u)
    n = 1 if not math.isfinite(limit) else max(1, math.ceil(dt / (cfg.cfl_safety * limit)))
    if n > cfg.max_substeps:
        raise CFLError(f"{n} substeps needed (limit {limit:.3e})", limit=limit)
    h = dt / n
    grid = transport.grid
    before = water_in_place(state, grid, cfg.porosity)
    injected = h * n * transport.inj.sum()
    produced = 0.0
    S = state.S
    for _ in range(n):
        S, prod = transport.step(S, u, h, check=False)
        produced += h * prod
    tally[0] += n
    new = SaturationState(S, state.time + dt, state.step + 1)
    resid = water_in_place(new, grid, cfg.porosity) - before - injected - produced
    return new, abs(resid) / max(abs(before) + injected, 1e-300)


def run_impes(pair: NestedGridPair, k, wells: WellConfig, model: Optional[MobilityModel] = None,
              config: Optional[ImpesConfig] = None, well_pair: Optional[NestedGridPair] = None,
              bases: Optional[dict] = None, progress=None) -> ImpesResult:
    """Run the reference and coarse IMPES pipelines side by side."""
    model = model or MobilityModel()
    cfg = config or ImpesConfig()
    fine = pair.fine
    q = wells.density(pair, well_pair)
    total_rate = np.maximum(q, 0.0).sum() * fine.cell_volume
    if cfg.horizon is not None:
        horizon = float(cfg.horizon)
    elif total_rate > 0:
        horizon = cfg.pore_volumes * cfg.porosity * fine.volume / total_rate
    else:
        horizon = 1.0
    dt = horizon / cfg.n_steps
    t0 = _time.perf_counter()
    S0 = np.zeros(fine.n_cells)
    lt0 = mobilities(S0, model)[2]
    # initial fine solution: defines the global field of the global basis
    init = solve_expanded_fine(assemble_expanded_fine(fine, k.scaled(lt0), q))
    bases = dict(bases or {})
    for name in cfg.variants:
        if name in bases:
            continue
        if name == "global":
            bases[name] = build_global_basis(pair, k, compute_solution_global_field(fine, k, solution=init))
        elif name == "local":
            bases[name] = build_local_basis(pair, k)
        elif name in ("oversampled", "os"):
            bases[name] = build_oversampled_basis(pair, k, cfg.layers)
        else:
            raise ConfigError(f"unknown basis variant {name!r}")
    solvers = {name: CoarsePressure(bases[name], k, q) for name in cfg.variants}
    names = list(cfg.variants)
    if cfg.track_reference:
        solvers = {"reference": FinePressure(fine, k, q), **solvers}
    order = list(solvers)
    transport = UpwindTransport(fine, q, model, cfg.porosity)
    timings = {"setup": _time.perf_counter() - t0}
    states = {name: SaturationState(S0.copy()) for name in order}
    errors = np.zeros((cfg.n_steps + 1, len(names)))
    snapshots = {}
    balance = {name: 0.0 for name in order}
    tallies = {name: [0] for name in order}
    lo, hi = 0.0, 1.0
    t1 = _time.perf_counter()
    for step in range(1, cfg.n_steps + 1):
        for name in order:
            st = states[name]
            lt = mobilities(st.S, model)[2]
            u = solvers[name].solve(lt)
            new, res = _advance(st, u, transport, dt, cfg, tallies[name])
            balance[name] = max(balance[name], res)
            states[name] = new
            lo = min(lo, new.S.min())
            hi = max(hi, new.S.max())
        if cfg.track_reference:
            ref = states["reference"].S
            nref = np.linalg.norm(ref)
            for i, name in enumerate(names):
                errors[step, i] = np.linalg.norm(states[name].S - ref) / nref if nref > 0 else 0.0
        if step in cfg.snapshot_steps:
            snapshots[step] = {name: states[name].S.copy() for name in order}
        if progress is not None:
            progress(step, errors[step])
    timings["steps"] = _time.perf_counter() - t1
    return ImpesResult(names, errors, snapshots, balance, {n: t[0] for n, t in tallies.items()},
                       states, dt, lo, hi, timings)
