"""Error metrics, experiment drivers, exporters and configuration files.

Configuration files use a flat ``key = value`` grammar:

* one entry per line; ``#`` starts a comment; blank lines are ignored;
* keys are identifiers, optionally dotted (``field.k_channel``,
  ``source.H``, ``impes.n_steps``) to address the nested parameter maps;
* values are ``true``/``false``, integers, floats, or comma-separated
  lists of those (``24,24,24``); several grids are separated by ``;``
  (``coarse = 10,10,1; 20,20,1``); anything else is a string.

The canonical serialized form of a configuration is sorted JSON
(``config.json`` next to every result set).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .basis import build_basis, compute_harmonic_global_fields, compute_solution_global_field
from .coarse import CoarseAssembler, coarse_conservation, downscale, solve_coarse
from .exceptions import ConfigError, MsFEMError
from .fem import SolverConfig, assemble_expanded_fine, l2_norm, solve_expanded_fine
from .fields import make_permeability, make_source
from .grid import LOCAL_FACE_AXIS, NestedGridPair, build_nested
from .homog import homogenize_cell, laminate_k_star, write_k_star

log = logging.getLogger(__name__)

EXPERIMENTS = ("table1", "table2", "table3", "table4", "impes", "convergence", "homog-check")


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------
@dataclass
class ErrorReport:
    variant: str
    formulation: str  # expanded | msfem
    fine: tuple
    coarse: tuple
    u_norm: float
    grad_norm: float
    p_norm: float
    u_error: float
    grad_error: float
    p_error: float
    lam_error: float = math.nan
    conservation: float = math.nan  # max per-coarse-cell |int div u - int f| / ||f||_1
    fingerprint: dict = dc_field(default_factory=dict)

    COLUMNS = ("experiment", "variant", "formulation", "fine", "coarse", "u_norm", "grad_norm", "p_norm",
               "u_error", "grad_error", "p_error", "lam_error", "conservation")

    def row(self) -> dict:
        out = {c: getattr(self, c, None) for c in self.COLUMNS}
        out["experiment"] = self.fingerprint.get("experiment", "")
        out["fine"] = "x".join(str(v) for v in self.fine)
        out["coarse"] = "x".join(str(v) for v in self.coarse)
        return out


def _p_norm(grid, p):
    return float(np.sqrt(grid.cell_volume * np.sum(p * p)))


def projected_multipliers(reference, basis) -> np.ndarray:
    """Profile-weighted face averages of the reference pressure trace, one per coarse dof.

    Oversampled bases have no attached face profile; they use plain face averages.
    """
    pair = basis.pair
    lam = np.asarray(reference.lam, dtype=float)
    out = np.full(basis.n_dofs, np.nan)
    for K in range(pair.coarse.n_cells):
        sub = basis.subgrid(K)
        for jj, (d, j) in enumerate(zip(basis.cell_dofs[K], basis.cell_sides[K])):
            if not np.isnan(out[d]):
                continue
            idx = sub.grid.boundary_faces(LOCAL_FACE_AXIS[j], j % 2)
            faces = sub.faces[idx]
            w = basis.psi[K][jj, idx] if basis.conforming else np.ones(len(idx))
            tot = w.sum()
            if abs(tot) < 1e-12 * max(np.abs(w).sum(), 1e-300):
                w, tot = np.ones(len(idx)), float(len(idx))
            out[d] = float(w @ lam[faces]) / tot
    return out


def multiplier_error(reference, coarse_solution, basis) -> float:
    """Discrete -1/2 norm: sqrt(sum_K sum_{e in dK} h_K |e| (P lam_ref - lam)^2), interior coarse faces."""
    if coarse_solution is None or coarse_solution.lam is None or reference.lam is None:
        return math.nan
    pair = basis.pair
    coarse = pair.coarse
    diff = projected_multipliers(reference, basis) - coarse_solution.lam
    # both multiplier sets carry an additive constant fixed by the mean-zero pressures
    interior = ~coarse.boundary_face_mask[basis.dof_face]
    hK = float(np.max(coarse.h))
    areas = coarse.face_areas[basis.dof_face]
    # every interior coarse face is seen by its two cells
    return float(np.sqrt(2.0 * hK * np.sum((areas * diff * diff)[interior])))


def compute_errors(reference, candidate, pair: NestedGridPair, basis=None, formulation: str = "expanded",
                   k=None, fingerprint: Optional[dict] = None) -> ErrorReport:
    """L2 errors of a downscaled solution against the fine reference.

    ``formulation='msfem'`` replaces the candidate gradient by ``-u/k``
    (only for fields that are positive and constant per fine cell).
    """
    grid = pair.fine
    if reference.grid != grid or candidate.grid != grid:
        raise ConfigError("reference and candidate must live on the pair's fine grid")
    theta = candidate.theta
    if formulation == "msfem":
        if k is None or not k.is_cellwise_constant or np.any(k.cell_values <= 0):
            raise ConfigError("the u/k gradient needs a cellwise constant, positive permeability")
        theta = -candidate.u_local / (k.cell_values[:, None] * np.asarray(k.anisotropy)[
            np.array(LOCAL_FACE_AXIS)][None, :])
    elif formulation != "expanded":
        raise ConfigError(f"unknown formulation {formulation!r}")
    coarse_sol = getattr(candidate, "coarse", None)
    lam_err = multiplier_error(reference, coarse_sol, basis) if basis is not None else math.nan
    fp = dict(fingerprint or {})
    return ErrorReport(
        variant=fp.get("variant", getattr(basis, "variant", "")),
        formulation=formulation,
        fine=tuple(grid.counts),
        coarse=tuple(pair.coarse.counts),
        u_norm=reference.velocity_norm(),
        grad_norm=reference.gradient_norm(),
        p_norm=_p_norm(grid, reference.p),
        u_error=l2_norm(grid, candidate.u_local - reference.u_local),
        grad_error=l2_norm(grid, theta - reference.theta),
        p_error=_p_norm(grid, candidate.p - reference.p),
        lam_error=lam_err,
        fingerprint=fp,
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass
class ExperimentConfig:
    experiment: str
    fine: tuple = (24, 24, 24)
    coarse: tuple = ((8, 8, 8),)
    domain: tuple = (1.0, 1.0, 1.0)
    field: str = "channel"
    field_params: dict = dc_field(default_factory=dict)
    source: str = "corner_wells_3d"
    source_params: dict = dc_field(default_factory=dict)
    variants: tuple = ("local", "global")
    layers: int = 1
    seed: Optional[int] = None
    tol: float = 1e-10
    rule: Optional[str] = None
    global_fields: str = "solution"  # solution | harmonic
    msfem: bool = False  # also report the u/k gradient columns
    impes: dict = dc_field(default_factory=dict)
    homog: dict = dc_field(default_factory=dict)
    out: Optional[str] = None
    vtk: bool = True

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        self.fine = _triple(self.fine, "fine")
        coarse = self.coarse
        if len(coarse) and np.isscalar(coarse[0]):
            coarse = (coarse,)
        self.coarse = tuple(_triple(c, "coarse") for c in coarse)
        self.domain = tuple(float(v) for v in self.domain)
        if len(self.domain) != 3:
            raise ConfigError("domain must be an upper corner (X, Y, Z)")
        if isinstance(self.variants, str):
            self.variants = tuple(v.strip() for v in self.variants.split(",") if v.strip())
        self.variants = tuple("oversampled" if v == "os" else v for v in self.variants)
        for v in self.variants:
            if v not in ("local", "oversampled", "global"):
                raise ConfigError(f"unknown basis variant {v!r}")
        if self.layers < 0:
            raise ConfigError("oversampling layers must be nonnegative")
        if self.global_fields not in ("solution", "harmonic"):
            raise ConfigError("global_fields must be 'solution' or 'harmonic'")

    @classmethod
    def preset(cls, experiment: str, **overrides) -> "ExperimentConfig":
        """Configuration of a named experiment; keyword overrides replace preset values."""
        base = dict(PRESETS.get(experiment, {}))
        for key in ("field_params", "source_params", "impes", "homog"):
            if key in overrides and key in base:
                overrides[key] = {**base[key], **overrides[key]}
        base.update(overrides)
        return cls(experiment, **base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fine"] = list(self.fine)
        d["coarse"] = [list(c) for c in self.coarse]
        d["domain"] = list(self.domain)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown configuration keys: {sorted(extra)}")
        if "experiment" not in d:
            raise ConfigError("configuration needs an 'experiment' key")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def fingerprint(self, **extra) -> dict:
        fp = {"experiment": self.experiment, "fine": list(self.fine), "field": self.field, "seed": self.seed}
        fp.update(extra)
        return fp


def _triple(v, name):
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigError(f"{name} must have three entries, got {v!r}")
    return t


_H10 = {"H": 0.1}
PRESETS = {
    "table1": dict(fine=(24, 24, 24), coarse=((8, 8, 8),), field="channel", field_params={"k_channel": 1e-4},
                   source="corner_wells_3d", msfem=True),
    "table2": dict(fine=(24, 24, 24), coarse=((8, 8, 8),), field="vanishing_channel",
                   source="corner_wells_3d"),
    "table3": dict(fine=(100, 100, 8), coarse=((10, 10, 1), (20, 20, 1)), domain=(1.0, 1.0, 0.08),
                   field="oscillatory", source="corner_wells_2d", source_params=_H10),
    "table4": dict(fine=(100, 100, 8), coarse=((10, 10, 1), (20, 20, 1)), domain=(1.0, 1.0, 0.08),
                   field="random_shale", source="corner_wells_2d", source_params=_H10, seed=0),
    "impes": dict(fine=(100, 100, 1), coarse=((10, 10, 1),), domain=(1.0, 1.0, 0.08), field="random_shale",
                  source="two_spot", seed=0, impes={"n_steps": 2000, "pore_volumes": 1.0, "snapshot_steps": [700],
                                                      "mu_w": 0.5, "mu_o": 1.0, "rate": 1.0}),
    "convergence": dict(fine=(64, 64, 1), coarse=((4, 4, 1), (8, 8, 1), (16, 16, 1)), domain=(1.0, 1.0, 1 / 64),
                        field="smooth", source="corner_wells_2d", source_params={"H": 0.25},
                        variants=("local",)),
    "homog-check": dict(fine=(64, 64, 1), coarse=((1, 1, 1),), field="user_table", variants=(),
                        homog={"a": 1.0, "b": 10.0, "checker_a": 1.0, "checker_b": 4.0,
                               "checker_sizes": [8, 16, 32, 64]}),
}


def _parse_scalar(s: str):
    t = s.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def parse_value(s: str):
    s = s.strip()
    if ";" in s:
        return [parse_value(part) for part in s.split(";") if part.strip()]
    if "," in s:
        return [_parse_scalar(part) for part in s.split(",") if part.strip()]
    return _parse_scalar(s)


NESTED = {"field": "field_params", "source": "source_params", "impes": "impes", "homog": "homog"}


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat key=value format (see the module docstring)."""
    top, nested = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        val = parse_value(value)
        if "." in key:
            head, sub = key.split(".", 1)
            if head not in NESTED:
                raise ConfigError(f"line {lineno}: unknown section {head!r}")
            nested.setdefault(NESTED[head], {})[sub] = val
        else:
            top[key] = val
    if "experiment" not in top:
        raise ConfigError("configuration needs an 'experiment' key")
    if "coarse" in top and top["coarse"] and not isinstance(top["coarse"][0], list):
        top["coarse"] = [top["coarse"]]
    if "variants" in top and isinstance(top["variants"], str):
        top["variants"] = [top["variants"]]
    exp = top.pop("experiment")
    try:
        return ExperimentConfig.preset(exp, **top, **nested)
    except TypeError as exc:
        raise ConfigError(f"bad configuration: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if str(path).endswith(".json"):
        return ExperimentConfig.from_json(text)
    return parse_config_text(text)


# ---------------------------------------------------------------------------
# exporters
# ---------------------------------------------------------------------------
def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_reports_csv(path, reports) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ErrorReport.COLUMNS)
            for r in reports:
                row = r.row()
                w.writerow([_fmt(row[c]) for c in ErrorReport.COLUMNS])
    except OSError as exc:
        raise MsFEMError(f"cannot write {path}: {exc}") from exc


def write_series_csv(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise MsFEMError(f"cannot write {path}: {exc}") from exc


def cell_velocity(grid, u_local: np.ndarray) -> np.ndarray:
    """Cell-centre velocity vectors (n, 3) from per-cell +axis face fluxes."""
    out = np.empty((grid.n_cells, 3))
    for a in range(3):
        out[:, a] = 0.5 * (u_local[:, 2 * a] + u_local[:, 2 * a + 1]) / grid.face_area(a)
    return out


def write_vtk(path, grid, cell_data: dict, title: str = "exmsfem") -> None:
    """Legacy ASCII VTK STRUCTURED_POINTS with CELL_DATA (scalars (n,) or vectors (n, 3))."""
    n = grid.n_cells
    nx, ny, nz = grid.counts
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET STRUCTURED_POINTS",
             f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
             "ORIGIN " + " ".join(repr(float(v)) for v in grid.lower),
             "SPACING " + " ".join(repr(float(v)) for v in grid.h),
             f"CELL_DATA {n}"]
    for name, arr in cell_data.items():
        a = np.asarray(arr, dtype=float)
        key = name.replace(" ", "_")
        if a.shape == (n,):
            lines += [f"SCALARS {key} double 1", "LOOKUP_TABLE default"]
            lines += ["%.12e" % v for v in a]
        elif a.shape == (n, 3):
            lines.append(f"VECTORS {key} double")
            lines += ["%.12e %.12e %.12e" % tuple(v) for v in a]
        else:
            raise ConfigError(f"cell data {name!r} has shape {a.shape}, expected ({n},) or ({n}, 3)")
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise MsFEMError(f"cannot write {path}: {exc}") from exc


def export(obj, fmt: str, path, grid=None) -> str:
    """Write a report list (csv), a config (json-config) or cell fields (vtk-legacy-structured)."""
    if fmt == "csv":
        write_reports_csv(path, obj if isinstance(obj, (list, tuple)) else [obj])
    elif fmt == "json-config":
        try:
            with open(path, "w") as fh:
                fh.write(obj.to_json() + "\n")
        except OSError as exc:
            raise MsFEMError(f"cannot write {path}: {exc}") from exc
    elif fmt == "vtk-legacy-structured":
        if grid is None:
            grid = obj.grid
            obj = {"u": cell_velocity(grid, obj.u_local), "p": obj.p}
        write_vtk(path, grid, obj)
    else:
        raise ConfigError(f"unknown export format {fmt!r}")
    return str(path)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------
@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list = dc_field(default_factory=list)
    artifacts: list = dc_field(default_factory=list)
    extra: dict = dc_field(default_factory=dict)

    def table(self):
        """Rows (variant, formulation, coarse, u_error, grad_error) for printing."""
        return [(r.variant, r.formulation, "x".join(map(str, r.coarse)), r.u_error, r.grad_error)
                for r in self.reports]


def _problem(cfg: ExperimentConfig, coarse):
    pair = build_nested(cfg.fine, coarse, cfg.domain)
    params = dict(cfg.field_params)
    if cfg.seed is not None and cfg.field == "random_shale":
        params.setdefault("seed", cfg.seed)
    k = make_permeability(cfg.field, pair, params)
    f = make_source(cfg.source, pair, cfg.source_params)
    return pair, k, f


def _outdir(cfg):
    if cfg.out is None:
        return None
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _wrap(cfg, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except MsFEMError as exc:
        exc.args = (f"{exc.args[0] if exc.args else exc} [config: {cfg.experiment} fine={cfg.fine} "
                    f"field={cfg.field} seed={cfg.seed}]",) + exc.args[1:]
        raise


def run_table(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    scfg = SolverConfig(tol=cfg.tol)
    ref = None
    gfields = None
    timings = {}
    for coarse in cfg.coarse:
        pair, k, f = _problem(cfg, coarse)
        if ref is None:
            t = time.perf_counter()
            ref = solve_expanded_fine(assemble_expanded_fine(pair.fine, k, f, rule=cfg.rule), scfg)
            timings["reference"] = time.perf_counter() - t
        for variant in cfg.variants:
            t = time.perf_counter()
            gf = None
            if variant == "global":
                if gfields is None:
                    if cfg.global_fields == "solution":
                        gfields = compute_solution_global_field(pair.fine, k, solution=ref)
                    else:
                        gfields = compute_harmonic_global_fields(pair.fine, k, rule=cfg.rule, cfg=scfg)
                gf = gfields
            basis = build_basis(variant, pair, k, gf, cfg.layers, cfg.rule)
            system = CoarseAssembler(basis, k, cfg.rule).assemble(f)
            sol = solve_coarse(system, "hybrid")
            down = downscale(sol, basis)
            timings[f"{variant}_{'x'.join(map(str, coarse))}"] = time.perf_counter() - t
            cons = np.abs(coarse_conservation(system, sol)).max() / max(np.abs(f.cell_integrals).sum(), 1e-300)
            forms = ["msfem", "expanded"] if cfg.msfem else ["expanded"]
            for form in forms:
                rep = compute_errors(ref, down, pair, basis, form, k,
                                     cfg.fingerprint(variant=variant, coarse=list(coarse)))
                rep.conservation = float(cons)
                res.reports.append(rep)
            out = _outdir(cfg)
            if out and cfg.vtk:
                path = os.path.join(out, f"u_{variant}_{'x'.join(map(str, coarse))}.vtk")
                res.artifacts.append(export(down, "vtk-legacy-structured", path))
    out = _outdir(cfg)
    if out:
        if cfg.vtk and ref is not None:
            res.artifacts.append(export(ref, "vtk-legacy-structured", os.path.join(out, "u_reference.vtk")))
        res.artifacts.append(export(res.reports, "csv", os.path.join(out, f"{cfg.experiment}.csv")))
    res.extra["reference"] = ref
    res.extra["timings"] = timings
    return res


def run_convergence(cfg: ExperimentConfig) -> ExperimentResult:
    """Sweep the coarse grids on a fixed fine grid and fit log-log error slopes."""
    res = run_table(cfg)
    Hs = np.array([1.0 / c[0] for c in cfg.coarse])
    slopes = {}
    for variant in cfg.variants:
        reps = [r for r in res.reports if r.variant == variant and r.formulation == "expanded"]
        for name in ("p_error", "u_error"):
            e = np.array([getattr(r, name) for r in reps])
            slopes[(variant, name)] = float(np.polyfit(np.log(Hs), np.log(e), 1)[0])
    res.extra["H"] = Hs
    res.extra["slopes"] = slopes
    out = _outdir(cfg)
    if out:
        rows = [(v, n, s) for (v, n), s in sorted(slopes.items())]
        path = os.path.join(out, "convergence_slopes.csv")
        write_series_csv(path, ("variant", "quantity", "slope"), rows)
        res.artifacts.append(path)
    return res


def checkerboard_values(n: int, a: float, b: float) -> np.ndarray:
    """(n, n, 1) cell values: 2x2 checkerboard of a and b on the unit cell."""
    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    block = ((ix >= n // 2).astype(int) + (iy >= n // 2).astype(int)) % 2
    return np.where(block.ravel() == 0, a, b).astype(float)


def laminate_values(n: int, a: float, b: float) -> np.ndarray:
    """(n, n, 1) cell values: layers normal to x, a on x < 1/2 and b elsewhere."""
    ix = np.tile(np.arange(n), n)
    return np.where(ix < n // 2, a, b).astype(float)


def run_homog_check(cfg: ExperimentConfig) -> ExperimentResult:
    from .grid import CartesianGrid

    h = cfg.homog
    a, b = float(h.get("a", 1.0)), float(h.get("b", 10.0))
    n = int(cfg.fine[0])
    g = CartesianGrid((n, n, 1))
    lam = homogenize_cell(laminate_values(n, a, b), g)
    exact = laminate_k_star(a, b)
    res = ExperimentResult(cfg)
    rel = float(np.max(np.abs(np.diag(lam.k_star) - np.diag(exact)) / np.diag(exact)))
    res.extra["laminate"] = {"k_star": lam.k_star, "exact": exact, "rel_error": rel, "bounds": lam.check_bounds()}
    ca, cb = float(h.get("checker_a", 1.0)), float(h.get("checker_b", 4.0))
    rows = []
    checker = []
    for m in h.get("checker_sizes", [8, 16, 32, 64]):
        gm = CartesianGrid((int(m), int(m), 1))
        r = homogenize_cell(checkerboard_values(int(m), ca, cb), gm)
        target = math.sqrt(ca * cb)
        err = abs(r.k_star[0, 0] - target) / target
        checker.append({"n": int(m), "k_xx": float(r.k_star[0, 0]), "rel_error": float(err),
                        "bounds": r.check_bounds()})
        rows.append(("checkerboard", int(m), r.k_star[0, 0], target, err, r.check_bounds()))
    res.extra["checkerboard"] = checker
    out = _outdir(cfg)
    if out:
        p = os.path.join(out, "k_star_laminate.txt")
        write_k_star(p, lam.k_star)
        rows.insert(0, ("laminate", n, lam.k_star[0, 0], exact[0, 0], rel, lam.check_bounds()))
        q = os.path.join(out, "homog_check.csv")
        write_series_csv(q, ("case", "n", "k_xx", "target", "rel_error", "bounds_ok"), rows)
        res.artifacts += [p, q]
    return res


def run_impes_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentResult:
    from .twophase import ImpesConfig, MobilityModel, WellConfig, run_impes

    p = dict(cfg.impes)
    pair = build_nested(cfg.fine, cfg.coarse[0], cfg.domain)
    params = dict(cfg.field_params)
    if cfg.field == "random_shale":
        params.setdefault("seed", 0 if cfg.seed is None else cfg.seed)
    k = make_permeability(cfg.field, pair, params)
    wells = WellConfig.two_spot(pair, float(p.get("rate", 1.0)))
    model = MobilityModel(float(p.get("mu_w", 0.5)), float(p.get("mu_o", 1.0)))
    icfg = ImpesConfig(n_steps=int(p.get("n_steps", 2000)), pore_volumes=float(p.get("pore_volumes", 1.0)),
                       horizon=p.get("horizon"), variants=tuple(cfg.variants), layers=cfg.layers,
                       snapshot_steps=tuple(int(s) for s in np.atleast_1d(p.get("snapshot_steps", [700]))))
    r = _wrap(cfg, run_impes, pair, k, wells, model, icfg, progress=progress)
    res = ExperimentResult(cfg, extra={"impes": r})
    out = _outdir(cfg)
    if out:
        path = os.path.join(out, "impes_errors.csv")
        rows = [(i,) + tuple(r.errors[i]) for i in range(r.errors.shape[0])]
        write_series_csv(path, ("step",) + tuple(r.names), rows)
        res.artifacts.append(path)
        if cfg.vtk:
            for step, snaps in sorted(r.snapshots.items()):
                vp = os.path.join(out, f"saturation_{step:05d}.vtk")
                write_vtk(vp, pair.fine, {f"S_{n}": s for n, s in snaps.items()})
                res.artifacts.append(vp)
    return res


def run_experiment(config, progress=None) -> ExperimentResult:
    """Run one experiment and write its artifacts (CSV, VTK, config JSON) when ``out`` is set."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    if cfg.experiment in ("table1", "table2", "table3", "table4"):
        res = _wrap(cfg, run_table, cfg)
    elif cfg.experiment == "convergence":
        res = _wrap(cfg, run_convergence, cfg)
    elif cfg.experiment == "homog-check":
        res = _wrap(cfg, run_homog_check, cfg)
    else:
        res = run_impes_experiment(cfg, progress)
    out = _outdir(cfg)
    if out:
        res.artifacts.append(export(cfg, "json-config", os.path.join(out, "config.json")))
    return res
