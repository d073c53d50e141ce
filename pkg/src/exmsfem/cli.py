"""Command line interface: ``exmsfem <subcommand> [options]``.

Exit codes: 0 success, 1 generic package error, 2 grid, 3 config,
4 compatibility, 5 degenerate coefficient/basis, 6 solver, 7 domain/CFL.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .exceptions import ConfigError, MsFEMError
from .harness import EXPERIMENTS, ExperimentConfig, load_config, run_experiment


def _triple(text):
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected NX,NY,NZ, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def _common(p):
    p.add_argument("--fine", type=_triple, help="fine grid NX,NY,NZ")
    p.add_argument("--coarse", type=_triple, action="append",
                   help="coarse grid NX,NY,NZ (repeat for several grids)")
    p.add_argument("--basis", help="comma list of local|os|global")
    p.add_argument("--layers", type=int, help="oversampling layers")
    p.add_argument("--tol", type=float, help="solver tolerance")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="seed for random fields")
    p.add_argument("--steps", type=int, help="IMPES time steps")
    p.add_argument("--no-vtk", action="store_true", help="skip VTK output")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exmsfem", description="Expanded mixed multiscale FEM experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", help="key=value config file (or .json)")
    _common(run)
    for name in EXPERIMENTS:
        _common(sub.add_parser(name, help=f"run the {name} experiment"))
    return parser


def _overrides(args) -> dict:
    o = {}
    if args.fine:
        o["fine"] = args.fine
    if args.coarse:
        o["coarse"] = tuple(args.coarse)
    if args.basis:
        o["variants"] = tuple(v.strip() for v in args.basis.split(",") if v.strip())
    if args.layers is not None:
        o["layers"] = args.layers
    if args.tol is not None:
        o["tol"] = args.tol
    if args.out:
        o["out"] = args.out
    if args.seed is not None:
        o["seed"] = args.seed
    if args.no_vtk:
        o["vtk"] = False
    return o


def make_config(args) -> ExperimentConfig:
    o = _overrides(args)
    if args.command == "run":
        base = load_config(args.config).to_dict()
        impes = dict(base.get("impes", {}))
        base.update(o)
    else:
        base = ExperimentConfig.preset(args.command).to_dict()
        impes = dict(base.get("impes", {}))
        base.update(o)
    if args.steps is not None:
        impes["n_steps"] = args.steps
    base["impes"] = impes
    return ExperimentConfig.from_dict(base)


def _print(res, out):
    for rep in res.reports:
        print(f"{rep.variant:11s} {rep.formulation:8s} coarse={'x'.join(map(str, rep.coarse)):9s} "
              f"|u|={rep.u_norm:.4e} |grad p|={rep.grad_norm:.4e} "
              f"err u={rep.u_error:.4e} err grad p={rep.grad_error:.4e} err lam={rep.lam_error:.3e}", file=out)
    if "slopes" in res.extra:
        for (v, q), s in sorted(res.extra["slopes"].items()):
            print(f"slope {v} {q}: {s:.3f}", file=out)
    if "laminate" in res.extra:
        lam = res.extra["laminate"]
        print(f"laminate k* diag {lam['k_star'].diagonal()} exact {lam['exact'].diagonal()}", file=out)
        for c in res.extra["checkerboard"]:
            print(f"checkerboard n={c['n']}: k_xx={c['k_xx']:.5f} rel err {c['rel_error']:.2e}", file=out)
    if "impes" in res.extra:
        r = res.extra["impes"]
        e = r.errors
        for step in sorted(set([50, 700, e.shape[0] - 1]) & set(range(e.shape[0]))):
            print(f"step {step}: " + " ".join(f"{n}={e[step, i]:.4e}" for i, n in enumerate(r.names)), file=out)
        print(f"saturation range [{r.min_S:.3e}, {r.max_S:.3e}]", file=out)
    for a in res.artifacts:
        print(f"wrote {a}", file=out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = make_config(args)
        res = run_experiment(cfg)
    except MsFEMError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, KeyError) as exc:
        err = ConfigError(str(exc))
        print(f"error [{err.category}]: {exc}", file=sys.stderr)
        return err.exit_code
    if not args.quiet:
        _print(res, sys.stdout)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
