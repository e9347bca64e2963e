"""Command-line front end: ``popinf {fom,train,evaluate,diagnose,replay}``.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 refusal to
train an ill-posed regression.
"""
import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__, fom, pipeline
from .affine import AffineStructure, Verdict, check_well_posedness
from .dataset import SnapshotSet, file_checksum
from .regression import DEFAULT_GRID, LogGrid
from .rom import SCHEMES, Rom

logger = logging.getLogger("popinf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_ILL_POSED = 0, 2, 3, 4

# Per-benchmark defaults for training and evaluation.
PROBLEMS = {
    "heat": {
        "config": fom.HeatConfig,
        "solve": fom.heat_solve,
        "structure": fom.heat_structure,
        "train": {"scheme": "imex_euler", "dt": None,
                  "derivatives": "backward", "energy": 1e-10},
    },
    "fhn": {
        "config": fom.FhnConfig,
        "solve": fom.fhn_solve,
        "structure": fom.fhn_structure,
        "train": {"scheme": "rk4", "dt": "auto",
                  "derivatives": "central", "energy": 1e-7},
    },
}


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


# Helpers ======================================================================
def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _workers(args):
    if args.workers is not None:
        n = args.workers
    else:
        try:
            n = int(os.environ.get("POPINF_WORKERS", "1"))
        except ValueError as exc:
            raise UsageError("POPINF_WORKERS must be an integer") from exc
    if n < 1:
        raise UsageError("--workers must be at least 1")
    return n


def _parse_params(doc, param_dim=None):
    """Parameter list from ``params`` (explicit) or ``grid`` (product)."""
    if "params" in doc:
        pts = np.atleast_2d(np.asarray(doc["params"], dtype=float))
        if pts.size == 0:
            raise UsageError("empty parameter list")
    elif "grid" in doc:
        ranges = doc["grid"]
        if not ranges or any(len(r) == 0 for r in ranges):
            raise UsageError("empty parameter grid")
        pts = fom.make_param_grid(ranges, doc.get("exclude", ()))
        if len(pts) == 0:
            raise UsageError("parameter grid is empty after exclusions")
    else:
        raise UsageError("config needs 'params' or 'grid'")
    if param_dim is not None and pts.shape[1] != param_dim:
        raise UsageError(f"parameters have dimension {pts.shape[1]}, "
                         f"expected {param_dim}")
    return pts


def load_param_file(path):
    """Parameter array from a grid or explicit-list config file."""
    return _parse_params(_read_json(path))


def _parse_samples(text):
    try:
        rows = [[float(v) for v in row.split(",")]
                for row in text.split(";") if row.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --samples {text!r}: {exc}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError("--samples needs rows of equal length")
    return np.array(rows)


def _problem(name):
    if name not in PROBLEMS:
        raise UsageError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}")
    return PROBLEMS[name]


def _solver_config(problem, solver_doc):
    try:
        return PROBLEMS[problem]["config"](**(solver_doc or {}))
    except TypeError as exc:
        raise UsageError(f"bad solver settings: {exc}") from exc


def _solve_one(problem, solver_doc, mu):
    """Picklable worker entry for full-order solves."""
    cfg = PROBLEMS[problem]["config"](**solver_doc)
    return PROBLEMS[problem]["solve"](cfg, mu)


def _map_solves(problem, solver_doc, params, workers):
    func = partial(_solve_one, problem, solver_doc)
    if workers == 1:
        return [func(mu) for mu in params]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, list(params)))


def _write_manifest(out, args, argv, inputs, outputs, started):
    def sums(paths):
        return {str(p): file_checksum(p) for p in paths if Path(p).is_file()}
    doc = {
        "command": args.command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": getattr(args, "config", None),
        "seed": args.seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "inputs": sums(inputs),
        "outputs": sums(outputs),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_seconds": round(time.time() - started, 3),
    }
    path = Path(out) / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _outputs(directory):
    return sorted(p for p in Path(directory).iterdir()
                  if p.is_file() and p.name != "run_manifest.json")


# Commands =====================================================================
def cmd_fom(args):
    doc = _read_json(args.config)
    problem = doc.get("problem")
    _problem(problem)
    solver_doc = doc.get("solver", {})
    cfg = _solver_config(problem, solver_doc)
    structure = PROBLEMS[problem]["structure"]()
    params = _parse_params(doc, structure.param_dim)
    logger.info("solving %s at %d parameters", problem, len(params))
    results = _map_solves(problem, asdict(cfg), params, _workers(args))
    failed = [i for i, r in enumerate(results) if not r.ok]
    if failed:
        msg = f"full-order solve diverged at {len(failed)} parameter(s): " + \
            ", ".join(str(params[i].tolist()) for i in failed[:5])
        if not args.allow_partial:
            raise NumericalError(msg + " (use --allow-partial to keep the rest)")
        logger.warning(msg)
    keep = [i for i in range(len(params)) if i not in set(failed)]
    if not keep:
        raise NumericalError("every full-order solve diverged")
    snaps = SnapshotSet(params[keep], [results[i].states for i in keep],
                        results[keep[0]].time, structure.var_names,
                        structure.param_names,
                        {"problem": problem, "solver": asdict(cfg),
                         "dropped": [params[i].tolist() for i in failed]})
    out = Path(args.out)
    manifest = snaps.save(out)
    structure.save(out / "structure.json")
    print(f"wrote {len(keep)} entries to {manifest}")
    return manifest, [args.config]


def _structure_for(args, meta):
    if args.structure:
        try:
            return AffineStructure.load(args.structure)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"bad structure config: {exc}") from exc
    problem = meta.get("problem")
    if problem in PROBLEMS:
        return PROBLEMS[problem]["structure"]()
    raise UsageError("dataset does not name a known problem; pass --structure")


def _dt_value(text):
    if text is None or text in ("auto", "none"):
        return None if text == "none" else text
    try:
        return float(text)
    except ValueError as exc:
        raise UsageError(f"bad --dt {text!r}") from exc


def cmd_train(args):
    dataset = Path(args.dataset)
    if dataset.is_dir():
        dataset = dataset / "dataset.json"
    try:
        snaps = SnapshotSet.load(dataset)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load dataset: {exc}") from exc
    doc = _read_json(args.config) if args.config else {}
    structure = _structure_for(args, snaps.meta)
    defaults = dict(PROBLEMS.get(snaps.meta.get("problem"), {})
                    .get("train", {}))
    defaults.update(doc)

    def pick(name, cli_value):
        return cli_value if cli_value is not None else defaults.get(name)

    ranks = pick("ranks", args.ranks)
    if ranks is not None:
        ranks = tuple(int(r) for r in np.atleast_1d(ranks))
        if len(ranks) == 1:
            ranks = ranks * structure.num_vars
        if len(ranks) != structure.num_vars:
            raise UsageError(f"--ranks needs {structure.num_vars} values")
    grid_text = pick("lambda_grid", args.lambda_grid)
    try:
        grid = LogGrid.parse(grid_text) if grid_text else DEFAULT_GRID
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    energy = pick("energy", args.energy) or 1e-10
    if not 0 < energy < 1:
        raise UsageError("--energy must lie in (0, 1)")
    dt = _dt_value(args.dt) if args.dt is not None else defaults.get("dt", "auto")
    config = pipeline.TrainConfig(
        ranks=ranks, energy=energy, grid=grid,
        search=tuple(defaults["search"]) if "search" in defaults else None,
        fixed=defaults.get("fixed", {}),
        refine=not args.no_refine and defaults.get("refine", True),
        scheme=pick("scheme", args.scheme) or "rk4", dt=dt,
        derivatives=pick("derivatives", args.derivatives) or "central")

    report = check_well_posedness(structure, snaps.params)
    print(report.format())
    if report.verdict is not Verdict.ok:
        names = ", ".join(f"Theta_{t}" for t in report.deficient_terms)
        msg = (f"regression is ill-posed ({report.verdict.value}); "
               f"deficient: {names}")
        if not args.force:
            print(f"refusing to train: {msg} (use --force to override)",
                  file=sys.stderr)
            return None, [dataset], EXIT_ILL_POSED
        logger.warning("%s; continuing because of --force", msg)

    workers = _workers(args)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        result = pipeline.train(structure, snaps, config, force=True,
                                map_func=pool.map if pool else map)
    except FloatingPointError as exc:
        raise NumericalError(str(exc)) from exc
    finally:
        if pool:
            pool.shutdown()
    rom = result.rom
    rom.meta.update({"problem": snaps.meta.get("problem"),
                     "solver": snaps.meta.get("solver"),
                     "dataset": str(dataset)})
    out = Path(args.out)
    path = rom.save(out)
    trace = [{"lambda": [float(v) for v in lam], "training_error": val}
             for lam, val in result.search.trace]
    (out / "search_trace.json").write_text(json.dumps(trace, indent=1) + "\n")
    lam_text = ", ".join(f"{k}={v:.6g}" for k, v in result.lambdas.items())
    print(f"ranks r = {list(rom.ranks)}; {lam_text}; training error "
          f"{result.search.value:.6g}"
          + (" (on search boundary)" if result.search.on_boundary else ""))
    print(f"wrote ROM to {path}")
    inputs = [dataset] + ([args.config] if args.config else []) + \
        ([args.structure] if args.structure else [])
    return path, inputs, EXIT_OK


def cmd_evaluate(args):
    try:
        rom = Rom.load(args.rom)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load ROM: {exc}") from exc
    doc = _read_json(args.config) if args.config else {}
    problem = doc.get("problem", rom.meta.get("problem"))
    _problem(problem)
    solver_doc = doc.get("solver", rom.meta.get("solver") or {})
    cfg = _solver_config(problem, solver_doc)
    params = _parse_params(doc, rom.structure.param_dim) if doc else None
    if params is None:
        raise UsageError("evaluate needs --config with 'params' or 'grid'")
    scheme = args.scheme or rom.meta.get("scheme", "rk4")
    dt = _dt_value(args.dt) if args.dt is not None else rom.meta.get("dt", "auto")
    workers = _workers(args)
    solver_dict = asdict(cfg)

    def solve(mu):
        return _solve_one(problem, solver_dict, mu)

    if workers > 1:
        # solve every FOM up front in parallel, then hand results over
        results = _map_solves(problem, solver_dict, params, workers)
        lookup = {tuple(p): r for p, r in zip(params, results)}
        solve = lambda mu: lookup[tuple(mu)]  # noqa: E731
    ev = pipeline.evaluate(rom, params, solve, scheme=scheme, dt=dt,
                           retry=args.policy == "retry")
    if ev.fom_failures and not args.allow_partial:
        raise NumericalError(f"full-order solve diverged at "
                             f"{len(ev.fom_failures)} test parameter(s)")
    surface = ev.rom_surface
    num_unstable = int(np.sum(~surface.stable))
    if args.policy == "include":
        surface.errors[~surface.stable] = np.inf
        surface.stable = np.ones_like(surface.stable)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    surface.to_csv(out / "errors.csv")
    summary = {"rom": surface.summary,
               "projection": ev.projection_surface.summary,
               "num_points": int(len(params)),
               "num_unstable": num_unstable,
               "policy": args.policy, "scheme": scheme, "dt": dt}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    s = summary["rom"]
    if s:
        print(f"ROM error: median {s['median']:.3e}, q90 {s['q90']:.3e}, "
              f"max {s['max']:.3e}, geometric mean {s['geometric_mean']:.3e}")
    print(f"unstable: {summary['num_unstable']} of {len(params)}")
    inputs = [Path(args.rom) / "rom.json" if Path(args.rom).is_dir()
              else args.rom] + ([args.config] if args.config else [])
    return out / "errors.csv", inputs


def cmd_diagnose(args):
    if args.structure:
        structure = AffineStructure.load(args.structure)
    elif args.problem:
        structure = _problem(args.problem)["structure"]()
    else:
        raise UsageError("diagnose needs --structure or --problem")
    if args.samples:
        samples = _parse_samples(args.samples)
    elif args.dataset:
        samples = SnapshotSet.load(Path(args.dataset) / "dataset.json"
                                   if Path(args.dataset).is_dir()
                                   else args.dataset).params
    elif args.config:
        samples = _parse_params(_read_json(args.config))
    else:
        raise UsageError("diagnose needs --samples, --dataset, or --config")
    if samples.shape[1] != structure.param_dim:
        raise UsageError(f"samples have dimension {samples.shape[1]}, "
                         f"structure expects {structure.param_dim}")
    report = check_well_posedness(structure, samples)
    print(report.format())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"verdict": report.verdict.value,
               "num_samples": report.num_samples,
               "terms": [{"term": d.term_label, "q": d.q, "rank": d.rank,
                          "condition_number": d.condition_number,
                          "singular_values": d.singular_values.tolist()}
                         for d in report.diagnostics]}
        (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    return report


def cmd_replay(args):
    doc = _read_json(args.manifest)
    argv = doc.get("argv")
    if not argv or argv[0] == "replay":
        raise UsageError("manifest does not record a replayable command")
    cwd = doc.get("cwd")
    here = os.getcwd()
    if cwd and Path(cwd).is_dir():
        os.chdir(cwd)
    try:
        return main(argv)
    finally:
        os.chdir(here)


# Parser =======================================================================
def build_parser():
    p = argparse.ArgumentParser(
        prog="popinf",
        description="Learn affine-parametric polynomial reduced-order models "
                    "from simulation snapshots.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required,
                        help="output directory")
        sp.add_argument("--seed", type=int, default=0,
                        help="recorded in the run manifest (the pipeline is "
                             "deterministic)")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker count (default: $POPINF_WORKERS or 1)")

    s = sub.add_parser("fom", help="run a full-order solver over a parameter "
                                   "set and write a dataset")
    s.add_argument("--config", required=True, help="solver and grid config")
    s.add_argument("--allow-partial", action="store_true",
                   help="keep converged solves when some diverge")
    common(s)

    s = sub.add_parser("train", help="learn a ROM from a dataset")
    s.add_argument("dataset", help="dataset manifest or directory")
    s.add_argument("--config", help="training config (JSON)")
    s.add_argument("--structure", help="structure config (JSON)")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--ranks", type=int, nargs="+",
                   help="POD ranks, one per variable (or one for all)")
    g.add_argument("--energy", type=float,
                   help="residual-energy threshold for rank selection")
    s.add_argument("--lambda-grid", help="log grid 'lo:hi:num' per searched "
                                         "weight (default 1e-12:1e6:7)")
    s.add_argument("--scheme", choices=SCHEMES)
    s.add_argument("--dt", help="ROM step: a number, 'auto', or 'none'")
    s.add_argument("--derivatives", choices=("central", "backward"))
    s.add_argument("--no-refine", action="store_true",
                   help="skip the Nelder-Mead refinement")
    s.add_argument("--force", action="store_true",
                   help="train even if the regression is ill-posed")
    common(s)

    s = sub.add_parser("evaluate", help="compare a ROM with full-order "
                                        "solves over a test grid")
    s.add_argument("rom", help="ROM directory or manifest")
    s.add_argument("--config", help="test grid config (JSON)")
    s.add_argument("--scheme", choices=SCHEMES)
    s.add_argument("--dt")
    s.add_argument("--policy", choices=("exclude", "include", "retry"),
                   default="exclude",
                   help="treatment of unstable ROM runs in the summary")
    s.add_argument("--allow-partial", action="store_true")
    common(s)

    s = sub.add_parser("diagnose", help="well-posedness report for samples")
    s.add_argument("--structure")
    s.add_argument("--problem", choices=sorted(PROBLEMS))
    s.add_argument("--samples", help="'a,b;c,d;...'")
    s.add_argument("--dataset")
    s.add_argument("--config")
    common(s, out_required=False)

    s = sub.add_parser("replay", help="re-run the command in a run manifest")
    s.add_argument("manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=None)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        if args.command == "replay":
            return cmd_replay(args)
        code = EXIT_OK
        if args.command == "fom":
            _, inputs = cmd_fom(args)
        elif args.command == "train":
            _, inputs, code = cmd_train(args)
        elif args.command == "evaluate":
            _, inputs = cmd_evaluate(args)
        else:
            cmd_diagnose(args)
            inputs = [x for x in (args.structure, args.config) if x]
        if getattr(args, "out", None) and Path(args.out).is_dir():
            _write_manifest(args.out, args, argv, inputs,
                            _outputs(args.out), started)
        return code
    except UsageError as exc:
        print(f"popinf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, ZeroDivisionError) as exc:
        print(f"popinf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except pipeline.WellPosednessError as exc:
        print(f"popinf: refusing to train: {exc}", file=sys.stderr)
        return EXIT_ILL_POSED


if __name__ == "__main__":
    sys.exit(main())
