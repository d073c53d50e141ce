"""Permeability fields and source terms on the fine grid.

A :class:`CoefficientField` is evaluated cell by cell: a per-cell scalar,
optionally multiplied by a profile given in the cell's reference coordinates
(used for the vanishing bubble), or an analytic function of physical position.

Per-cell tables (``user_table``) are flat arrays of one value per fine cell in
the grid's lexicographic order (x fastest, then y, then z). Text tables hold
whitespace separated numbers; binary tables (``.bin``/``.raw``) are
little-endian float64 with no header; ``.npy`` files are accepted as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .exceptions import CompatibilityError, ConfigError, DegenerateCoefficient
from .grid import CartesianGrid, NestedGridPair

PERMEABILITY_VARIANTS = (
    "uniform",
    "channel",
    "vanishing_channel",
    "oscillatory",
    "smooth",
    "random_shale",
    "user_table",
)
SOURCE_VARIANTS = ("corner_wells_3d", "corner_wells_2d", "two_spot", "user_table")


def bubble(xi, eta):
    """max(0, 1 - 32 x(1-x) y(1-y)) on the reference unit square."""
    return np.maximum(0.0, 1.0 - 32.0 * xi * (1.0 - xi) * eta * (1.0 - eta))


def quadrature_rule(rule: str):
    """Tensor rule on the unit reference cube: (points (nq, 3), weights summing to 1)."""
    if rule == "midpoint":
        return np.full((1, 3), 0.5), np.ones(1)
    if rule.startswith("gauss"):
        n = int(rule[5:] or 2)
        x, w = np.polynomial.legendre.leggauss(n)
        x = 0.5 * (x + 1.0)
        w = 0.5 * w
        gz, gy, gx = np.meshgrid(x, x, x, indexing="ij")
        wz, wy, wx = np.meshgrid(w, w, w, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        return pts, (wx * wy * wz).ravel()
    raise ConfigError(f"unknown quadrature rule {rule!r}")


@dataclass(frozen=True)
class CoefficientField:
    variant: str
    grid: CartesianGrid
    cell_values: Optional[np.ndarray] = None
    analytic: Optional[Callable] = field(default=None, repr=False)
    profile: Optional[Callable] = field(default=None, repr=False)
    profile_mask: Optional[np.ndarray] = field(default=None, repr=False)
    anisotropy: tuple = (1.0, 1.0, 1.0)
    params: dict = field(default_factory=dict)

    @property
    def is_cellwise_constant(self) -> bool:
        return self.analytic is None and (self.profile is None or not np.any(self.profile_mask))

    @property
    def default_rule(self) -> str:
        return "midpoint" if self.is_cellwise_constant else "gauss2"

    def evaluate(self, cells, ref_points) -> np.ndarray:
        """k at reference points of the given cells, shape (len(cells), n_points)."""
        cells = np.asarray(cells)
        ref_points = np.atleast_2d(ref_points)
        if self.analytic is not None:
            corner = self.grid.cell_lower_corners(cells)
            phys = corner[:, None, :] + ref_points[None, :, :] * self.grid.h
            vals = self.analytic(phys.reshape(-1, 3)).reshape(len(cells), len(ref_points))
            return np.asarray(vals, dtype=float)
        vals = np.repeat(self.cell_values[cells][:, None], len(ref_points), axis=1)
        if self.profile is not None:
            mask = self.profile_mask[cells]
            if np.any(mask):
                prof = self.profile(ref_points[:, 0], ref_points[:, 1])
                vals[mask] *= prof[None, :]
        return vals

    def quadrature(self, rule: Optional[str] = None):
        """(reference points, reference weights, values (n_cells, nq)) over all cells."""
        rule = rule or self.default_rule
        pts, w = quadrature_rule(rule)
        return pts, w, self.evaluate(np.arange(self.grid.n_cells), pts)

    def cell_means(self, rule: Optional[str] = None) -> np.ndarray:
        _, w, vals = self.quadrature(rule)
        return vals @ w

    def scaled(self, factor: np.ndarray, variant: Optional[str] = None) -> "CoefficientField":
        """Field multiplied by a scalar or per-cell factor (e.g. a total mobility)."""
        factor = np.broadcast_to(np.asarray(factor, dtype=float), (self.grid.n_cells,))
        if self.analytic is not None:
            fn, grid = self.analytic, self.grid
            nx, ny, _ = grid.counts

            def scaled_fn(x):
                idx = np.floor((x - np.array(grid.lower)) / grid.h).astype(int)
                idx = np.clip(idx, 0, np.array(grid.counts) - 1)
                return fn(x) * factor[(idx[:, 2] * ny + idx[:, 1]) * nx + idx[:, 0]]

            return CoefficientField(variant or self.variant, grid, analytic=scaled_fn,
                                    anisotropy=self.anisotropy, params=self.params)
        return CoefficientField(variant or self.variant, self.grid, self.cell_values * factor,
                                profile=self.profile, profile_mask=self.profile_mask,
                                anisotropy=self.anisotropy, params=self.params)


@dataclass(frozen=True)
class SourceField:
    variant: str
    grid: CartesianGrid
    values: np.ndarray  # rate per unit volume, per fine cell

    @property
    def cell_integrals(self) -> np.ndarray:
        return self.values * self.grid.cell_volume

    @property
    def total(self) -> float:
        return float(self.cell_integrals.sum())


def _grid_of(pair_or_grid) -> CartesianGrid:
    return pair_or_grid.fine if isinstance(pair_or_grid, NestedGridPair) else pair_or_grid


def _cells_in_box(grid: CartesianGrid, lo, hi) -> np.ndarray:
    c = grid.cell_centers
    inside = np.ones(grid.n_cells, dtype=bool)
    for a in range(3):
        if lo[a] is not None:
            inside &= (c[:, a] > lo[a]) & (c[:, a] < hi[a])
    return inside


def read_table(path, grid: CartesianGrid) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        vals = np.load(path)
    elif path.suffix in (".bin", ".raw"):
        vals = np.fromfile(path, dtype="<f8")
    else:
        vals = np.loadtxt(path).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if vals.size != grid.n_cells:
        raise ConfigError(f"{path}: expected {grid.n_cells} values, found {vals.size}")
    return vals


def write_table(path, values) -> None:
    path = Path(path)
    values = np.asarray(values, dtype=float).ravel()
    if path.suffix in (".bin", ".raw"):
        values.astype("<f8").tofile(path)
    elif path.suffix == ".npy":
        np.save(path, values)
    else:
        np.savetxt(path, values, fmt="%.17g")


def _table_values(params, grid):
    if "values" in params:
        vals = np.asarray(params["values"], dtype=float).ravel()
        if vals.size != grid.n_cells:
            raise ConfigError(f"table has {vals.size} values for {grid.n_cells} cells")
        return vals
    if "path" in params:
        return read_table(params["path"], grid)
    raise ConfigError("user_table needs 'values' or 'path'")


def _channel_mask(grid, params):
    y = params.get("y_range", (4 / 24, 5 / 24))
    z = params.get("z_range", (7 / 24, 8 / 24))
    return _cells_in_box(grid, (None, y[0], z[0]), (None, y[1], z[1]))


def random_shale_values(grid, seed, shale_fraction=0.1, channel_fraction=0.1,
                        moderate=(1.0, 0.1), k_shale=1e-6, k_channel=100.0, layered=True):
    """Seeded cell categories: (values, shale mask).

    With ``layered`` the categories are drawn per (x, y) column and repeated
    in z, so the field (and the two-spot flow) is two-dimensional.
    """
    rng = np.random.default_rng(seed)
    nx, ny, nz = grid.counts
    m = nx * ny if layered else grid.n_cells
    u = rng.random(m)
    shale = u < shale_fraction
    sand = (u >= shale_fraction) & (u < shale_fraction + channel_fraction)
    rest = ~(shale | sand)
    vals = np.empty(m)
    vals[shale] = k_shale
    vals[sand] = k_channel
    pick = rng.random(m) < 0.5
    vals[rest & pick] = moderate[0]
    vals[rest & ~pick] = moderate[1]
    if layered:
        # cells are x-fastest then y then z: tiling the column values repeats them per layer
        vals = np.tile(vals, nz)
        shale = np.tile(shale, nz)
    return vals, shale


def make_permeability(variant: str, pair_or_grid, params=None, seed=None) -> CoefficientField:
    """Build one of the permeability fields used by the experiments.

    Parameters by variant (all optional unless noted):

    * ``uniform``: ``value`` (1).
    * ``channel``: ``k_channel`` (1e-4), ``k_background`` (1), ``y_range``,
      ``z_range`` (the one-cell channel of the 24^3 configuration).
    * ``vanishing_channel``: as ``channel``; channel cells carry the bubble.
    * ``oscillatory``: ``period`` (0.1), ``offset`` (1.5).
    * ``smooth``: 2 + sin(2 pi x) sin(2 pi y).
    * ``random_shale``: ``seed`` required; ``shale_fraction``,
      ``channel_fraction``, ``moderate``, ``k_shale``, ``k_channel``,
      ``layered`` (True: columns constant in z).
    * ``user_table``: ``values`` or ``path``; ``vanishing_mask`` optional.

    ``anisotropy`` (three diagonal factors) applies to every variant.
    """
    params = dict(params or {})
    grid = _grid_of(pair_or_grid)
    aniso = tuple(float(a) for a in params.get("anisotropy", (1.0, 1.0, 1.0)))
    n = grid.n_cells
    if variant == "uniform":
        fld = CoefficientField(variant, grid, np.full(n, float(params.get("value", 1.0))),
                               anisotropy=aniso, params=params)
    elif variant in ("channel", "vanishing_channel"):
        mask = _channel_mask(grid, params)
        vals = np.full(n, float(params.get("k_background", 1.0)))
        if variant == "channel":
            vals[mask] = float(params.get("k_channel", 1e-4))
            fld = CoefficientField(variant, grid, vals, anisotropy=aniso, params=params)
        else:
            vals[mask] = float(params.get("k_channel", 1.0))
            fld = CoefficientField(variant, grid, vals, profile=bubble, profile_mask=mask,
                                   anisotropy=aniso, params=params)
    elif variant == "oscillatory":
        period = float(params.get("period", 0.1))
        offset = float(params.get("offset", 1.5))

        def osc(x):
            return (np.sin(2 * np.pi * x[:, 0] / period) + offset) * (np.sin(2 * np.pi * x[:, 1] / period) + offset)

        fld = CoefficientField(variant, grid, analytic=osc, anisotropy=aniso, params=params)
    elif variant == "smooth":
        def smooth(x):
            return 2.0 + np.sin(2 * np.pi * x[:, 0]) * np.sin(2 * np.pi * x[:, 1])

        fld = CoefficientField(variant, grid, analytic=smooth, anisotropy=aniso, params=params)
    elif variant == "random_shale":
        seed = params.get("seed", seed)
        if seed is None:
            raise ConfigError("random_shale needs a seed")
        vals, shale = random_shale_values(
            grid, int(seed),
            shale_fraction=float(params.get("shale_fraction", 0.1)),
            channel_fraction=float(params.get("channel_fraction", 0.1)),
            moderate=tuple(params.get("moderate", (1.0, 0.1))),
            k_shale=float(params.get("k_shale", 1e-6)),
            k_channel=float(params.get("k_channel", 100.0)),
            layered=bool(params.get("layered", True)),
        )
        params["seed"] = int(seed)
        fld = CoefficientField(variant, grid, vals, profile=bubble, profile_mask=shale,
                               anisotropy=aniso, params=params)
    elif variant == "user_table":
        vals = _table_values(params, grid)
        mask = params.get("vanishing_mask")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).ravel()
            fld = CoefficientField(variant, grid, vals, profile=bubble, profile_mask=mask,
                                   anisotropy=aniso, params=params)
        else:
            fld = CoefficientField(variant, grid, vals, anisotropy=aniso, params=params)
    else:
        raise ConfigError(f"unknown permeability variant {variant!r}")
    check_coefficient(fld)
    return fld


def check_coefficient(fld: CoefficientField, rule: Optional[str] = None) -> None:
    """Reject negative values and cells whose quadrature values all vanish."""
    _, _, vals = fld.quadrature(rule)
    if np.any(vals < 0):
        raise DegenerateCoefficient("permeability must be nonnegative")
    dead = np.flatnonzero(vals.max(axis=1) <= 0.0)
    if dead.size:
        raise DegenerateCoefficient(
            f"permeability vanishes at every quadrature point of {dead.size} cell(s), first {dead[:5].tolist()}",
            cells=dead,
        )


def make_source(variant: str, pair_or_grid, params=None) -> SourceField:
    """Source term per fine cell.

    * ``corner_wells_3d``: +1 on (0, H)^3, -1 on (1-H, 1)^3 (box-relative).
    * ``corner_wells_2d``: same on the x-y corner squares, constant in z.
    * ``two_spot``: ``rate`` on the lower-left well block, ``-rate`` on the
      upper-right one.

    ``H`` defaults to the coarse cell size of the nested pair; for the
    corner variants it may be given explicitly (``H``) and for ``two_spot``
    the well block size is ``well_size`` (defaults to one coarse cell).
    """
    params = dict(params or {})
    grid = _grid_of(pair_or_grid)
    lower = np.array(grid.lower)
    upper = np.array(grid.upper)
    ext = upper - lower
    vals = np.zeros(grid.n_cells)
    if variant in ("corner_wells_3d", "corner_wells_2d", "two_spot"):
        if variant == "two_spot":
            size = params.get("well_size", params.get("H"))
        else:
            size = params.get("H")
        if size is None:
            if not isinstance(pair_or_grid, NestedGridPair):
                raise ConfigError(f"{variant} needs H or a nested grid pair")
            size = pair_or_grid.coarse.h
        size = np.broadcast_to(np.asarray(size, dtype=float), (3,)).copy()
        if variant == "corner_wells_3d":
            axes = (0, 1, 2)
            rate = 1.0
        else:
            axes = (0, 1)
            rate = float(params.get("rate", 1.0))
        lo_box = [None] * 3
        hi_box = [None] * 3
        for a in axes:
            lo_box[a], hi_box[a] = lower[a], lower[a] + size[a]
        inj = _cells_in_box(grid, lo_box, hi_box)
        for a in axes:
            lo_box[a], hi_box[a] = upper[a] - size[a], upper[a]
        prod = _cells_in_box(grid, lo_box, hi_box)
        vals[inj] = rate
        vals[prod] = -rate
    elif variant == "user_table":
        vals = _table_values(params, grid)
    else:
        raise ConfigError(f"unknown source variant {variant!r}")
    src = SourceField(variant, grid, vals)
    scale = float(np.abs(src.cell_integrals).sum())
    if abs(src.total) > 1e-14 * max(scale, 1e-300) and not params.get("allow_imbalance", False):
        raise CompatibilityError(f"source integrates to {src.total:.3e}, not zero")
    return src


def sample_at_quadrature(fld: CoefficientField, fine_cell: int, rule: Optional[str] = None):
    """List of (physical point, weight, k value) for one cell."""
    rule = rule or fld.default_rule
    if rule not in ("midpoint",) and not rule.startswith("gauss"):
        raise ConfigError(f"unknown quadrature rule {rule!r}")
    pts, w = quadrature_rule(rule)
    grid = fld.grid
    corner = grid.cell_lower_corners([fine_cell])[0]
    vals = fld.evaluate([fine_cell], pts)[0]
    phys = corner + pts * grid.h
    return [(phys[i], w[i] * grid.cell_volume, float(vals[i])) for i in range(len(w))]
