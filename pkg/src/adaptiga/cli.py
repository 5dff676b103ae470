"""Command-line driver.

Subcommands::

    adaptiga run [--preset NAME] [--config FILE] [--set key=value ...] [flags]
    adaptiga refine-demo --kind T --mu 2 --degree 1 --steps 3
    adaptiga check [--seed N]
    adaptiga dump-mesh MESHFILE [--svg OUT] [--mu MU --kind KIND]

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .adapt import AdaptConfig, AdaptRecord, NumericalFailure, adaptive_loop, rate_fit
from .checks import run_checks
from .geometry import GeometryError, get_geometry
from .hierarchy import HierMesh, LevelSequence, MeshError
from .problems import bump_problem, edge_singularity_problem, sine_problem
from .svg import write_mesh_svg

log = logging.getLogger("adaptiga")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3


class UsageError(Exception):
    """Invalid configuration or command line."""


# -- configuration ---------------------------------------------------------------
DEFAULTS = {
    "geometry": "square",
    "problem": "edge-singularity",
    "degree": "2",
    "multiplicity": "1",
    "elements": "4x4",
    "mu": "2",
    "kind": "T",
    "flavor": "THB",
    "theta": "0.25",
    "c_min": "1",
    "max_iter": "60",
    "max_dofs": "20000",
    "eta_tol": "0",
    "solver": "cg",
    "quad_extra": "0",
    "h_mode": "physical",
    "bump_a": "1/4",
    "bump_b": "3/4",
    "output": "out",
    "svg_every": "5",
    "seed": "0",
    "timing": "false",
}

PRESETS = {
    "edge-singularity": {"problem": "edge-singularity", "geometry": "square", "degree": "2",
                         "elements": "4x4", "mu": "2", "kind": "T", "theta": "0.25",
                         "c_min": "1"},
    "edge-singularity-uniform": {"problem": "edge-singularity", "geometry": "square",
                                 "degree": "2", "elements": "4x4", "c_min": "inf",
                                 "max_iter": "7"},
    "approx-class": {"problem": "bump", "bump_a": "1/4", "bump_b": "3/4", "geometry": "square",
                     "degree": "4", "multiplicity": "3", "elements": "2x2", "mu": "4",
                     "kind": "T", "theta": "0.5", "c_min": "1"},
    # the lines x = 1/5, 4/5 cross elements at every level; the problem declares
    # them as break lines, so cut elements get composite rules
    "approx-class-nonaligned": {"problem": "bump", "bump_a": "1/5", "bump_b": "4/5",
                                "geometry": "square", "degree": "4", "multiplicity": "3",
                                "elements": "2x2", "mu": "4", "kind": "T", "theta": "0.5",
                                "c_min": "1"},
    "smooth-sine": {"problem": "sine", "geometry": "square", "degree": "2", "elements": "2x2",
                    "c_min": "inf", "max_iter": "6"},
}

PROBLEMS = ("edge-singularity", "bump", "sine")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines (``#`` starts a comment)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(preset: Optional[str], file_values: dict, overrides: dict) -> dict:
    """Defaults, then preset, then config file, then command-line overrides."""
    cfg = dict(DEFAULTS)
    preset = file_values.get("preset", preset) if preset is None else preset
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cfg.update(PRESETS[preset])
    for src in (file_values, overrides):
        for key, value in src.items():
            if key == "preset":
                continue
            if key not in DEFAULTS:
                raise UsageError(f"unknown configuration key {key!r}")
            cfg[key] = str(value)
    cfg["preset"] = preset or "none"
    return cfg


def _number(cfg, key, kind=float):
    raw = cfg[key].strip()
    try:
        if kind is int:
            return int(raw)
        if raw.lower() in ("inf", "infinity"):
            return math.inf
        return float(Fraction(raw))
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"{key} = {raw!r} is not a valid {kind.__name__}") from None


def _flag(cfg, key) -> bool:
    raw = cfg[key].strip().lower()
    if raw in ("1", "true", "yes", "on"):
        return True
    if raw in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"{key} = {cfg[key]!r} is not a boolean")


def _elements(raw: str) -> tuple:
    parts = raw.lower().replace(",", "x").split("x")
    try:
        vals = tuple(int(v) for v in parts)
    except ValueError:
        raise UsageError(f"elements = {raw!r}; expected e.g. 4x4") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or any(v < 1 or v & (v - 1) for v in vals):
        raise UsageError(f"elements = {raw!r}; expected two powers of two")
    return vals


def build_adapt_config(cfg: dict) -> AdaptConfig:
    """Validate a resolved configuration and build the loop parameters."""
    p = _number(cfg, "degree", int)
    m = _number(cfg, "multiplicity", int)
    mu = _number(cfg, "mu", int)
    theta = _number(cfg, "theta")
    c_min = _number(cfg, "c_min")
    if not 1 <= p <= 8:
        raise UsageError("degree must lie in [1, 8]")
    if not 1 <= m <= p:
        raise UsageError("multiplicity must lie in [1, degree]")
    if mu < 2:
        raise UsageError("mu must be at least 2")
    if not 0.0 < theta <= 1.0:
        raise UsageError("theta must lie in (0, 1]")
    if not c_min >= 1.0:
        raise UsageError("c_min must be at least 1")
    kind = cfg["kind"].strip().upper()
    if kind not in ("H", "T"):
        raise UsageError("kind must be H or T")
    flavor = cfg["flavor"].strip().upper()
    if flavor not in ("HB", "THB"):
        raise UsageError("flavor must be HB or THB")
    solver = cfg["solver"].strip().lower()
    if solver not in ("cg", "direct"):
        raise UsageError("solver must be cg or direct")
    h_mode = cfg["h_mode"].strip().lower()
    if h_mode not in ("physical", "parametric"):
        raise UsageError("h_mode must be physical or parametric")
    name = cfg["problem"].strip()
    if name == "edge-singularity":
        problem = edge_singularity_problem()
    elif name == "bump":
        a, b = _number(cfg, "bump_a"), _number(cfg, "bump_b")
        if not 0.0 <= a < b <= 1.0:
            raise UsageError("bump needs 0 <= bump_a < bump_b <= 1")
        problem = bump_problem(a, b)
    elif name == "sine":
        problem = sine_problem()
    else:
        raise UsageError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}")
    try:
        geom = get_geometry(cfg["geometry"].strip())
    except GeometryError as exc:
        raise UsageError(str(exc)) from None
    return AdaptConfig(geometry=geom, problem=problem, degree=p, multiplicity=m,
                       elements=_elements(cfg["elements"]), mu=mu, kind=kind, flavor=flavor,
                       theta=theta, c_min=c_min, max_iter=_number(cfg, "max_iter", int),
                       max_dofs=_number(cfg, "max_dofs", int), eta_tol=_number(cfg, "eta_tol"),
                       solver=solver, quad_extra=_number(cfg, "quad_extra", int),
                       h_mode=h_mode, timing=_flag(cfg, "timing"))


# -- subcommands -------------------------------------------------------------------
def cmd_run(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip().replace("-", "_")] = v.strip()
    for key in ("degree", "multiplicity", "elements", "mu", "kind", "theta", "c_min",
                "max_iter", "max_dofs", "eta_tol", "geometry", "problem", "solver",
                "quad_extra", "output", "svg_every", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = str(val)
    if args.timing:
        overrides["timing"] = "true"
    cfg = resolve_config(args.preset, file_values, overrides)
    config = build_adapt_config(cfg)
    svg_every = _number(cfg, "svg_every", int)
    outdir = Path(cfg["output"])
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "config.txt").write_text(
            "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg)))
        fh = open(outdir / "history.csv", "w", newline="")
    except OSError as exc:
        raise UsageError(f"cannot write to {exc.filename or outdir}: {exc.strerror}") from None
    with fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AdaptRecord.CSV_FIELDS)
        fh.flush()

        def on_iteration(rec, mesh):
            writer.writerow(rec.csv_row())
            fh.flush()
            if not args.quiet:
                print(f"iter {rec.iter:3d}  elements {rec.n_elements:7d}  dofs {rec.n_dofs:7d}  "
                      f"eta {rec.eta:.4e}  err_h1 {rec.err_h1:.4e}  marked {rec.n_marked}",
                      flush=True)
            if svg_every > 0 and rec.iter % svg_every == 0:
                write_mesh_svg(outdir / f"mesh_{rec.iter:03d}.svg", mesh, config.geometry,
                               title=f"iteration {rec.iter}")

        result = adaptive_loop(config, on_iteration)
    (outdir / "mesh_final.txt").write_text(result.mesh.to_text())
    recs = result.records
    if len(recs) >= 3:
        slopes = {y: rate_fit(recs, "dofs", y, 3, decades=1.0) for y in ("eta", "err_h1")
                  if all(np.isfinite(getattr(r, y)) and getattr(r, y) > 0 for r in recs)}
        if slopes:
            print("fitted slopes vs dofs (last decade): "
                  + ", ".join(f"{k} {v:.3f}" for k, v in slopes.items()))
    print(f"wrote {outdir / 'history.csv'}")
    return EXIT_OK


def refine_demo(kind: str, mu: int, degree: int, steps: int, elements: int = 4,
                output: Optional[Path] = None) -> list:
    """Repeatedly mark the finest element at the origin corner and refine.

    Returns ``(step, n_elements, added, refined_elements)`` per step, where
    ``refined_elements`` lists the elements bisected by that step.
    """
    if steps < 1:
        raise UsageError("steps must be at least 1")
    lv = LevelSequence.uniform((degree, degree), (elements, elements))
    mesh = HierMesh.initial(lv)
    rows = []
    if output is not None:
        write_mesh_svg(output / "demo_000.svg", mesh, title="initial mesh")
    for step in range(1, steps + 1):
        marked = mesh.locate_point(np.zeros(2))
        new = mesh.refine([marked], mu, kind)
        refined = sorted(set(mesh.active_elements()) - set(new.active_elements()))
        if not new.is_admissible(mu, kind):
            raise MeshError(f"refinement produced a non-admissible mesh at step {step}")
        rows.append((step, new.num_elements, new.num_elements - mesh.num_elements, refined,
                     marked))
        if output is not None:
            write_mesh_svg(output / f"demo_{step:03d}.svg", new, marked=[marked],
                           title=f"step {step}")
        mesh = new
    return rows


def cmd_refine_demo(args) -> int:
    out = None
    if args.output:
        out = Path(args.output)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create {out}: {exc.strerror}") from None
    rows = refine_demo(args.kind.upper(), args.mu, args.degree, args.steps, args.elements, out)
    print(f"kind={args.kind.upper()} mu={args.mu} p=({args.degree},{args.degree}) "
          f"base={args.elements}x{args.elements}")
    for step, n, added, refined, marked in rows:
        others = [q for q in refined if q != marked]
        print(f"step {step}: marked {marked}  elements {n} (+{added})  "
              f"co-refined {len(others)}")
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_checks(args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERICAL


def cmd_dump_mesh(args) -> int:
    try:
        text = Path(args.mesh).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read mesh file {args.mesh}: {exc.strerror}") from None
    mesh = HierMesh.from_text(text)
    print(repr(mesh))
    for lev, count in enumerate(mesh.level_histogram()):
        print(f"level {lev}: {count} active elements")
    if args.mu is not None:
        ok, witness = mesh.check_admissible(args.mu, args.kind.upper())
        print(f"{args.kind.upper()}-admissible of class {args.mu}: {'yes' if ok else 'no'}"
              + ("" if ok else f" (witness {witness})"))
    if args.elements:
        for lev, cell in mesh.active_elements():
            print(lev, *cell)
    if args.svg:
        geom = None
        if args.geometry:
            try:
                geom = get_geometry(args.geometry)
            except GeometryError as exc:
                raise UsageError(str(exc)) from None
        try:
            write_mesh_svg(args.svg, mesh, geom)
        except OSError as exc:
            raise UsageError(f"cannot write {args.svg}: {exc.strerror}") from None
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptiga",
                                     description="Adaptive isogeometric analysis with "
                                                 "hierarchical splines.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an adaptive experiment")
    run.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    run.add_argument("--config", help="key = value configuration file")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any configuration key (repeatable)")
    run.add_argument("--degree", "-p", type=int)
    run.add_argument("--multiplicity", "-m", type=int)
    run.add_argument("--elements")
    run.add_argument("--mu", type=int)
    run.add_argument("--kind", choices=["H", "T", "h", "t"])
    run.add_argument("--theta")
    run.add_argument("--c-min", dest="c_min")
    run.add_argument("--max-iter", dest="max_iter", type=int)
    run.add_argument("--max-dofs", dest="max_dofs", type=int)
    run.add_argument("--eta-tol", dest="eta_tol")
    run.add_argument("--geometry", help="square, annulus or a geometry file")
    run.add_argument("--problem", choices=PROBLEMS)
    run.add_argument("--solver", choices=["cg", "direct"])
    run.add_argument("--quad-extra", dest="quad_extra", type=int)
    run.add_argument("--output", "-o")
    run.add_argument("--svg-every", dest="svg_every", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--timing", action="store_true",
                     help="record wall time (the CSV is then no longer reproducible)")
    run.add_argument("--quiet", "-q", action="store_true")
    run.set_defaults(func=cmd_run)

    demo = sub.add_parser("refine-demo", help="refine the corner element repeatedly")
    demo.add_argument("--kind", default="T", choices=["H", "T", "h", "t"])
    demo.add_argument("--mu", type=int, default=2)
    demo.add_argument("--degree", "-p", type=int, default=1)
    demo.add_argument("--steps", type=int, default=3)
    demo.add_argument("--elements", type=int, default=4)
    demo.add_argument("--output", "-o", help="directory for SVG snapshots")
    demo.set_defaults(func=cmd_refine_demo)

    check = sub.add_parser("check", help="run the deterministic self-checks")
    check.add_argument("--seed", type=int, default=0)
    check.set_defaults(func=cmd_check)

    dump = sub.add_parser("dump-mesh", help="summarize a mesh file")
    dump.add_argument("mesh")
    dump.add_argument("--svg")
    dump.add_argument("--geometry")
    dump.add_argument("--mu", type=int)
    dump.add_argument("--kind", default="T", choices=["H", "T", "h", "t"])
    dump.add_argument("--elements", action="store_true", help="list active elements")
    dump.set_defaults(func=cmd_dump_mesh)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, MeshError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
